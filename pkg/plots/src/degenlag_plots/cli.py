"""``plots <recipe.json>`` — render one figure or a list of figures."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .figures import FigureRecipe, plot


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots", description="Render figures from degenlag CSV outputs"
    )
    parser.add_argument("recipe", help="JSON recipe (object or list of objects)")
    args = parser.parse_args(argv)

    path = Path(args.recipe)
    if not path.exists():
        print(f"recipe not found: {path}", file=sys.stderr)
        return 2
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        print(f"malformed recipe: {exc}", file=sys.stderr)
        return 2

    recipes = payload if isinstance(payload, list) else [payload]
    try:
        for item in recipes:
            out = plot(FigureRecipe.from_json(item))
            print(out)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
