"""Regenerate docs/openapi.json from the live app definition."""

from __future__ import annotations

import json
from pathlib import Path

from oncopipe.service import ServiceConfig, create_app


def main() -> None:
    app = create_app(ServiceConfig())
    out = Path(__file__).parent.parent / "docs" / "openapi.json"
    out.parent.mkdir(exist_ok=True)
    out.write_text(json.dumps(app.openapi(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
