"""Oncology note standardization toolkit.

Turns free-text oncology notes into structured clinical variables, FHIR
bundles tagged with mCODE-style profiles, conformance metrics, and
clinical-trial match results.  Modules are layered bottom-up:

    terminology -> fhir_core -> extraction -> fhir_builder -> mcode
    -> conformance -> registry -> matching -> service / cli
"""

__version__ = "0.1.0"
