# formats.py - Lectura/escritura de artefactos (PFM, PNG, JSON, poses, PLY, CSV)
import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import DatasetIOError, InvalidInputError
from .geometry import DepthMap, ImageRGB, Intrinsics, NormalMap, Pose
from .utils import _cv2_or_raise


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"no se pudo crear el directorio: {e}", path.parent)


# ============================================================
# PFM (OpenCV escribe "Pf"/"PF" little-endian, filas de abajo hacia arriba)
# ============================================================

def write_pfm(path, array: np.ndarray) -> None:
    cv2 = _cv2_or_raise()
    path = Path(path)
    _ensure_parent(path)
    data = np.ascontiguousarray(array, dtype=np.float32)
    if data.ndim == 3:
        # OpenCV intercambia BGR↔RGB en PFM de 3 canales
        data = np.ascontiguousarray(data[..., ::-1])
    if not cv2.imwrite(str(path), data):
        raise DatasetIOError("no se pudo escribir PFM", path)


def read_pfm(path) -> np.ndarray:
    cv2 = _cv2_or_raise()
    path = Path(path)
    if not path.exists():
        raise DatasetIOError("archivo inexistente", path)
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise DatasetIOError("no se pudo leer PFM", path)
    if data.ndim == 3:
        data = data[..., ::-1]
    return np.asarray(data, dtype=np.float64)


def write_depth(path, depth: DepthMap) -> None:
    write_pfm(path, np.where(depth.validity, depth.values, np.nan))


def read_depth(path) -> DepthMap:
    return DepthMap.from_array(read_pfm(path))


def write_normals(path, normals: NormalMap) -> None:
    write_pfm(path, np.where(normals.validity[..., None], normals.vectors, np.nan))


def read_normals(path) -> NormalMap:
    vec = read_pfm(path)
    ok = np.all(np.isfinite(vec), axis=-1)
    return NormalMap.from_array(np.where(ok[..., None], vec, 0.0), ok)


def write_scalar_map(path, values: np.ndarray, valid=None) -> None:
    """Mapas por píxel (pérdidas, atenuación) como PFM de un canal."""
    values = np.asarray(values, dtype=np.float64)
    if valid is not None:
        values = np.where(valid, values, np.nan)
    write_pfm(path, values)


def write_light_field(prefix, field) -> Tuple[Path, Path]:
    """F̂ (3 canales) y Â (1 canal) como `<prefijo>_dir.pfm` y `<prefijo>_att.pfm`."""
    prefix = Path(prefix)
    dir_path = prefix.with_name(prefix.name + "_dir.pfm")
    att_path = prefix.with_name(prefix.name + "_att.pfm")
    write_pfm(dir_path, np.where(field.validity[..., None], field.directions, np.nan))
    write_scalar_map(att_path, field.attenuation, field.validity)
    return dir_path, att_path


# ============================================================
# PNG 8 bits
# ============================================================

def to_uint8(image: ImageRGB) -> np.ndarray:
    return np.round(image.channels * 255.0).astype(np.uint8)


def write_png(path, image: ImageRGB) -> None:
    cv2 = _cv2_or_raise()
    path = Path(path)
    _ensure_parent(path)
    bgr = cv2.cvtColor(to_uint8(image), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise DatasetIOError("no se pudo escribir PNG", path)


def write_gray_png(path, gray: np.ndarray) -> None:
    cv2 = _cv2_or_raise()
    path = Path(path)
    _ensure_parent(path)
    data = np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise DatasetIOError("no se pudo escribir PNG", path)


def read_png(path) -> ImageRGB:
    cv2 = _cv2_or_raise()
    path = Path(path)
    if not path.exists():
        raise DatasetIOError("archivo inexistente", path)
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetIOError("no se pudo leer PNG", path)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return ImageRGB(rgb.astype(np.float64) / 255.0)


# ============================================================
# JSON
# ============================================================

def write_json(path, data: Dict[str, Any]) -> None:
    path = Path(path)
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise DatasetIOError(f"no se pudo escribir JSON: {e}", path)


def read_json(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetIOError("archivo inexistente", path)
    except json.JSONDecodeError as e:
        raise DatasetIOError(f"JSON inválido: {e}", path)


def write_intrinsics(path, intrinsics: Intrinsics) -> None:
    write_json(path, intrinsics.to_dict())


def read_intrinsics(path) -> Intrinsics:
    return Intrinsics.from_dict(read_json(path))


# ============================================================
# Trayectorias: "frame_id tx ty tz qx qy qz qw"
# ============================================================

def format_pose_line(frame_id: str, pose: Pose) -> str:
    values = list(pose.translation) + list(pose.quaternion())
    return " ".join([str(frame_id)] + ["%.17g" % float(x) for x in values])


def parse_pose_line(line: str) -> Tuple[str, Pose]:
    parts = line.split()
    if len(parts) != 8:
        raise InvalidInputError(f"línea de pose con {len(parts)} campos (se esperaban 8): {line!r}")
    vals = [float(x) for x in parts[1:]]
    return parts[0], Pose.from_quaternion(vals[:3], vals[3:])


def write_trajectory(path, poses: Sequence[Tuple[str, Pose]]) -> None:
    path = Path(path)
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            for frame_id, pose in poses:
                f.write(format_pose_line(frame_id, pose) + "\n")
    except OSError as e:
        raise DatasetIOError(f"no se pudo escribir la trayectoria: {e}", path)


def read_trajectory(path) -> List[Tuple[str, Pose]]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln.strip() for ln in f]
    except FileNotFoundError:
        raise DatasetIOError("archivo inexistente", path)
    return [parse_pose_line(ln) for ln in lines if ln and not ln.startswith("#")]


# ============================================================
# Mallas PLY (trimesh) y CSV de energía
# ============================================================

def write_mesh(path, mesh) -> None:
    import trimesh
    path = Path(path)
    _ensure_parent(path)
    tm = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.triangles, process=False)
    try:
        tm.export(str(path), file_type="ply", encoding="binary")
    except OSError as e:
        raise DatasetIOError(f"no se pudo escribir PLY: {e}", path)


def read_mesh(path):
    """Lee un PLY (ascii o binario) como TriangleMesh; una nube sin caras queda sin triángulos."""
    import trimesh
    from .fusion import TriangleMesh
    path = Path(path)
    if not path.exists():
        raise DatasetIOError("archivo inexistente", path)
    loaded = trimesh.load(str(path), file_type="ply", process=False)
    faces = getattr(loaded, "faces", None)
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(np.asarray(loaded.vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64))


def write_energy_csv(path, rows: Iterable[Tuple[int, int, float]]) -> None:
    path = Path(path)
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "step", "energy"])
            for it, step, energy in rows:
                writer.writerow([int(it), int(step), "%.17g" % float(energy)])
    except OSError as e:
        raise DatasetIOError(f"no se pudo escribir CSV: {e}", path)


def read_energy_csv(path) -> List[Tuple[int, int, float]]:
    path = Path(path)
    if not path.exists():
        raise DatasetIOError("archivo inexistente", path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [(int(r["iteration"]), int(r["step"]), float(r["energy"])) for r in reader]


def write_text(path, text: str) -> None:
    path = Path(path)
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    except OSError as e:
        raise DatasetIOError(f"no se pudo escribir: {e}", path)
