"""The 27-expression capture catalog (two groups) over the demo rig sliders."""

from __future__ import annotations

from pathlib import Path

from ..scene.io import FORMAT_VERSION, ParseError, _LineReader, check_magic, _fmt
from .model import ExpressionSpec

CATALOG_MAGIC = "DAEXP"

#: Group one: the short capture session (group two may be skipped).
EXPRESSION_GROUP_ONE = (
    "pucker", "nose-wrinkle", "cheek-raise", "mouth-stretch",
    "squint-lower-eyelid", "lip-corner-pull", "jaw-open", "brow-lower",
    "brow-raise", "blink",
)

EXPRESSION_GROUP_TWO = (
    "upper-lip-raise", "nose-wrinkle-upper-lip-raise", "sharp-lip-corner-pull",
    "mouth-dimple", "lip-corner-depress", "lower-lip-depress", "purse",
    "lips-towards", "funnel", "funnel-purse", "funnel-towards", "oh",
    "jaw-open-extreme", "lip-corner-pull-jaw-open", "mouth-stretch-jaw-open",
    "smile", "smile-stretch-jaw-open",
)


def _lr(base: str, value: float = 1.0) -> dict[str, float]:
    return {f"{base}_l": value, f"{base}_r": value}


def _split(base: str) -> dict[str, str]:
    return {f"{base}_l": "left", f"{base}_r": "right"}


_ACTIVATIONS: dict[str, dict[str, float]] = {
    "pucker": {"pucker": 1.0},
    "nose-wrinkle": _lr("nose_wrinkle"),
    "cheek-raise": _lr("cheek_raise"),
    "mouth-stretch": _lr("mouth_stretch"),
    "squint-lower-eyelid": _lr("squint"),
    "lip-corner-pull": _lr("lip_corner_pull"),
    "jaw-open": {"jaw_open": 1.0},
    "brow-lower": _lr("brow_lower"),
    "brow-raise": _lr("brow_raise"),
    "blink": _lr("blink"),
    "upper-lip-raise": {"upper_lip_raise": 1.0},
    "nose-wrinkle-upper-lip-raise": {**_lr("nose_wrinkle"), "upper_lip_raise": 1.0},
    "sharp-lip-corner-pull": {**_lr("lip_corner_pull"), **_lr("cheek_raise", 0.5)},
    "mouth-dimple": _lr("mouth_dimple"),
    "lip-corner-depress": _lr("lip_corner_depress"),
    "lower-lip-depress": {"lower_lip_depress": 1.0},
    "purse": {"pucker": 1.0, "lips_toward": 0.5},
    "lips-towards": {"lips_toward": 1.0},
    "funnel": {"funnel": 1.0},
    "funnel-purse": {"funnel": 1.0, "pucker": 1.0},
    "funnel-towards": {"funnel": 1.0, "lips_toward": 1.0},
    "oh": {"funnel": 1.0, "jaw_open": 0.5},
    "jaw-open-extreme": {"jaw_open": 1.0, "lower_lip_depress": 1.0},
    "lip-corner-pull-jaw-open": {**_lr("lip_corner_pull"), "jaw_open": 1.0},
    "mouth-stretch-jaw-open": {**_lr("mouth_stretch"), "jaw_open": 1.0},
    "smile": _lr("smile"),
    "smile-stretch-jaw-open": {**_lr("smile"), **_lr("mouth_stretch", 0.5),
                               "jaw_open": 0.5},
}

_SPLITS: dict[str, dict[str, str]] = {
    "nose-wrinkle": _split("nose_wrinkle"),
    "cheek-raise": _split("cheek_raise"),
    "mouth-stretch": _split("mouth_stretch"),
    "squint-lower-eyelid": _split("squint"),
    "lip-corner-pull": _split("lip_corner_pull"),
    "brow-lower": _split("brow_lower"),
    "brow-raise": _split("brow_raise"),
    "blink": _split("blink"),
    "mouth-dimple": _split("mouth_dimple"),
    "lip-corner-depress": _split("lip_corner_depress"),
    "smile": _split("smile"),
}


def expression_catalog() -> list[ExpressionSpec]:
    """All 27 specs in session order (group one first)."""
    specs = []
    for group, names in ((1, EXPRESSION_GROUP_ONE), (2, EXPRESSION_GROUP_TWO)):
        for name in names:
            activations = _ACTIVATIONS[name]
            specs.append(ExpressionSpec(
                name=name,
                activations=dict(activations),
                dof_mask=tuple(sorted(activations)),
                split_map=dict(_SPLITS.get(name, {})),
                group=group,
            ))
    return specs


def save_expression_catalog(specs: list[ExpressionSpec], path: str | Path) -> None:
    lines = [f"{CATALOG_MAGIC} {FORMAT_VERSION}", str(len(specs))]
    for s in specs:
        lines.append(f"{s.name} {s.group} {len(s.activations)} {len(s.dof_mask)} "
                     f"{len(s.split_map)}")
        for k in sorted(s.activations):
            lines.append(f"{k} {_fmt(s.activations[k])}")
        for k in s.dof_mask:
            lines.append(k)
        for k in sorted(s.split_map):
            lines.append(f"{k} {s.split_map[k]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_expression_catalog(path: str | Path) -> list[ExpressionSpec]:
    reader = _LineReader(Path(path).read_bytes())
    check_magic(reader, CATALOG_MAGIC)
    (count,) = reader.ints(1, "spec count")
    specs = []
    for _ in range(count):
        head = reader.fields(5, "spec header")
        name, group, nact, nmask, nsplit = head[0], int(head[1]), int(head[2]), \
            int(head[3]), int(head[4])
        activations = {}
        for _ in range(nact):
            row = reader.fields(2, "activation")
            try:
                activations[row[0]] = float(row[1])
            except ValueError:
                raise ParseError("invalid activation value", reader.offset) from None
        mask = tuple(reader.fields(1, "mask slider")[0] for _ in range(nmask))
        split = {}
        for _ in range(nsplit):
            row = reader.fields(2, "split entry")
            split[row[0]] = row[1]
        specs.append(ExpressionSpec(name, activations, mask, split, group))
    return specs
