"""File exports for camcal: confusion CSV, CAM heatmaps (PGM/PPM), metrics logs."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

try:
    from PIL import Image
except ImportError:
    Image = None

from ..core.camc import calibrated_feature_map, compute_cam_weighted_sum
from ..core.evaluation import SplitReport
from ..core.functional import resize_bilinear
from ..core.pipeline import Model
from ..core.tensor import no_grad

logger = logging.getLogger(__name__)

OVERLAY_RATIO = 0.5


def _require_pillow() -> None:
    if Image is None:
        raise ImportError(
            "Pillow is required for heatmap export. Install with: pip install camcal[export]"
        )


def _build_color_ramp() -> np.ndarray:
    """Fixed 256-entry blue-cyan-yellow-red ramp."""
    anchors = np.array([0.0, 0.33, 0.66, 1.0])
    colors = np.array(
        [
            [0, 0, 128],
            [0, 200, 255],
            [255, 230, 0],
            [200, 0, 0],
        ],
        dtype=np.float64,
    )
    positions = np.linspace(0.0, 1.0, 256)
    ramp = np.stack([np.interp(positions, anchors, colors[:, i]) for i in range(3)], axis=1)
    return np.rint(ramp).astype(np.uint8)


COLOR_RAMP = _build_color_ramp()


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max scale a map to 0..255; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high - low <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - low) / (high - low) * 255.0).astype(np.uint8)


def write_pgm(values: np.ndarray, path: Path) -> Path:
    """8-bit binary grayscale (P5), min-max normalized."""
    _require_pillow()
    path = Path(path)
    Image.fromarray(to_uint8(values)).save(path, format="PPM")
    return path


def write_overlay_ppm(values: np.ndarray, image: np.ndarray, path: Path) -> Path:
    """Binary color (P6) blend of the ramp-colored heatmap with a [3,H,W] image in [0,1]."""
    _require_pillow()
    heat = Image.fromarray(COLOR_RAMP[to_uint8(values)])
    pixels = np.rint(np.clip(np.asarray(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.shape[0] == 1:
        pixels = np.repeat(pixels, 3, axis=0)
    base = Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)))
    path = Path(path)
    Image.blend(heat, base, OVERLAY_RATIO).save(path, format="PPM")
    return path


def export_confusion_csv(report: SplitReport, path: Path) -> Path:
    """Header of predicted class indices, then one row per true class; LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = report.num_classes
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true"] + [str(c) for c in range(n)])
        for c in range(n):
            writer.writerow([str(c)] + [str(int(v)) for v in report.confusion[c]])
    return path


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    return path


def write_json(data: Any, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class MetricsLog:
    """Append-only JSON-lines file, one object per record."""

    def __init__(self, path: Path, truncate: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate:
            self.path.write_text("", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> List[Dict[str, Any]]:
        lines = self.path.read_text(encoding="utf-8").splitlines()
        return [json.loads(line) for line in lines if line.strip()]


def cam_pair(model: Model, image: np.ndarray, class_index: int) -> Dict[str, np.ndarray]:
    """Vanilla and calibrated CAMs of one class, upsampled to the image size.

    The calibrated map applies the class weight to the reweighted feature map;
    classes without a prototype bank reuse the vanilla map.
    """
    weights = model.head.effective_weight()
    _, height, width = image.shape
    with no_grad():
        feature_maps, _ = model.backbone.forward(image[None])
        feature_map = feature_maps.data[0]
        vanilla = compute_cam_weighted_sum(feature_map, weights[class_index], class_index).numpy()
        calibrated = vanilla
        if model.camc is not None and model.camc.is_tail(class_index):
            reweighted = calibrated_feature_map(feature_map, model.camc, class_index).data[0]
            calibrated = compute_cam_weighted_sum(reweighted, weights[class_index], class_index).numpy()
        else:
            logger.warning("class %d is not calibrated; writing its vanilla CAM twice", class_index)
    return {
        "vanilla": resize_bilinear(vanilla[None], (height, width))[0],
        "camc": resize_bilinear(calibrated[None], (height, width))[0],
    }


def export_cam_heatmaps(
    model: Model,
    images: np.ndarray,
    image_ids: Sequence[int],
    classes: Sequence[int],
    directory: Path,
    overlay: bool = False,
) -> List[Path]:
    """Write cam_<imageid>_<class>_<vanilla|camc>.pgm for every (image, class) pair.

    Args:
        images: [B,C,H,W] images in [0, 1]
        image_ids: Identifier of each image used in the filenames
        classes: Class of each image whose maps are written
        overlay: Also write a .ppm blend of each heatmap with its image

    Raises:
        OSError: If the directory cannot be created or written
    """
    _require_pillow()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not len(images) == len(image_ids) == len(classes):
        raise ValueError("images, image_ids and classes must have the same length")
    written = []
    for image, image_id, class_index in zip(images, image_ids, classes):
        maps = cam_pair(model, np.asarray(image), int(class_index))
        for kind in ("vanilla", "camc"):
            stem = f"cam_{image_id}_{class_index}_{kind}"
            written.append(write_pgm(maps[kind], directory / f"{stem}.pgm"))
            if overlay:
                written.append(write_overlay_ppm(maps[kind], image, directory / f"{stem}.ppm"))
    return written
