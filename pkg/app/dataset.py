"""
On-disk dataset layout

    <dir>/input/NAME.png    original image
    <dir>/target/NAME.png   styled image (Lab target exported to 8-bit sRGB)
    <dir>/mask/NAME.png     region mask, 255 on the foreground
    <dir>/train.txt         newline-separated NAME list
    <dir>/test.txt
    <dir>/manifest.json     style kind, seed, planted transforms, split names
"""
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from app.color import lab_to_srgb, read_png, srgb_to_lab, write_png
from app.errors import DatasetError
from app.styles import SyntheticDataset
from app.training import StylePair

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
MANIFEST = "manifest.json"


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot write file ({e})", str(path)) from e


def save_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> Path:
    """
    Write ``dataset`` in the on-disk layout.

    Targets are quantized to 8-bit sRGB with clamping, so PNG targets carry up
    to half a code value of rounding error that the in-memory pairs do not.

    Returns:
        Path of the written manifest
    """
    out = Path(out_dir)
    try:
        for sub in ("input", "target", "mask"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory ({e})", str(out)) from e

    splits = {"train": dataset.train, "test": dataset.test}
    for pairs in splits.values():
        for pair in pairs:
            write_png(dataset.inputs[pair.name], out / "input" / f"{pair.name}.png")
            write_png(lab_to_srgb(pair.target), out / "target" / f"{pair.name}.png")
            mask = dataset.masks[pair.name].astype(np.uint8) * 255
            try:
                Image.fromarray(mask).save(out / "mask" / f"{pair.name}.png", format="PNG")
            except OSError as e:
                raise DatasetError(f"cannot write PNG ({e})", str(out / "mask" / pair.name)) from e

    names = {split: [p.name for p in pairs] for split, pairs in splits.items()}
    for split in SPLITS:
        _write_text(out / f"{split}.txt", "".join(f"{n}\n" for n in names[split]))

    style = dataset.style
    manifest = {
        "style": style.name,
        "kind": style.kind,
        "seed": style.seed,
        "width": dataset.width,
        "height": dataset.height,
        "transforms": [t.to_list() for t in style.transforms],
        "train": names["train"],
        "test": names["test"],
    }
    manifest_path = out / MANIFEST
    _write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d pairs to %s", len(dataset.train) + len(dataset.test), out)
    return manifest_path


def read_split(data_dir: str | Path, split: str) -> list[str]:
    path = Path(data_dir) / f"{split}.txt"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read split file ({e})", str(path)) from e
    names = [line.strip() for line in lines if line.strip()]
    if not names:
        raise DatasetError("split lists no images", str(path))
    return names


def load_pairs(data_dir: str | Path, names: list[str]) -> list[StylePair]:
    root = Path(data_dir)
    pairs = []
    for name in names:
        source = srgb_to_lab(read_png(root / "input" / f"{name}.png"))
        target = srgb_to_lab(read_png(root / "target" / f"{name}.png"))
        if source.pixels.shape != target.pixels.shape:
            raise DatasetError("input and target sizes differ", str(root / "target" / f"{name}.png"))
        pairs.append(StylePair(source, target, name))
    return pairs


def load_dataset(data_dir: str | Path, split: str) -> list[StylePair]:
    """Read the pairs of one split back as Lab images"""
    return load_pairs(data_dir, read_split(data_dir, split))


def load_mask(data_dir: str | Path, name: str) -> np.ndarray:
    path = Path(data_dir) / "mask" / f"{name}.png"
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except OSError as e:
        raise DatasetError(f"cannot read mask ({e})", str(path)) from e


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / MANIFEST
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetError(f"cannot read manifest ({e})", str(path)) from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest ({e})", str(path)) from e
