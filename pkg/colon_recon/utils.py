# utils.py - Configuración y utilidades compartidas
import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import DatasetIOError, InvalidInputError

ROOT = Path(__file__).resolve().parent.parent
CONFIG_ENV = "COLON_RECON_CONFIG"


def _cv2_safe():
    """Importa cv2 de forma segura, retorna None si no está disponible."""
    try:
        import cv2
        return cv2
    except ImportError:
        print("[utils] OpenCV no está disponible")
        return None


def _cv2_or_raise():
    """Importa cv2 o lanza una excepción si no está disponible."""
    cv2 = _cv2_safe()
    if cv2 is None:
        raise ImportError("OpenCV (cv2) no está instalado")
    return cv2


# ============================================================
# Valores por defecto por sección
# ============================================================

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "camera": {
        "fx": 24.0, "fy": 24.0, "cx": 31.5, "cy": 31.5,
        "width": 64, "height": 64,
    },
    "losses": {
        "lambda1": 0.1, "lambda2": 0.05, "lambda3": 0.05, "lambda4": 1e-3,
        "specular_threshold": 0.98, "norm_metric": "l1",
    },
    "illumination": {"mu": 2.0},
    "refinement": {
        "iterations": 1, "base_resolution": 32,
        "w_shading": 1.0, "w_prior": 0.1, "w_smooth": 0.05,
        "lambda1": 0.1, "lambda2": 0.5, "max_optimizer_steps": 150,
        "photometric_evaluations": 30,
    },
    "phantom": {
        "radius": 1.0, "fold_amplitude": 0.15, "fold_wavelength": 1.5,
        "length": 8.0, "centerline": "straight", "arc_radius": 0.0,
        "albedo": 0.06,
    },
    "trajectory": {
        "view": "down-the-barrel", "frames": 10, "seed": 0,
        "step": 0.1, "start": 1.0, "jitter": 0.01,
    },
    "render": {"max_steps": 256, "relaxation": 0.9, "specular_spots": 0},
    "fusion": {"voxel_fraction": 1.0 / 128.0, "truncation_voxels": 3.0, "voxel_size": None},
    "coverage": {
        "depth_tolerance": 0.02, "incidence_degrees": 5.0,
        "cells_u": 40, "cells_theta": 72,
    },
    "evaluation": {
        "samples": 100000, "seed": 0, "scale_low": 0.25, "scale_high": 4.0,
        "scale_tol": 1e-4, "folds": 5,
    },
    "paths": {"dataset": "dataset", "output": "output"},
}


def config_path(path: Optional[str] = None) -> Path:
    """Ruta del archivo de configuración: argumento > variable de entorno > config.json de la raíz."""
    if path:
        return Path(path)
    env = os.environ.get(CONFIG_ENV)
    if env:
        return Path(env)
    return ROOT / "config.json"


def load_config(path: Optional[str] = None) -> Dict:
    """Carga la configuración desde config.json."""
    target = config_path(path)
    try:
        with open(target, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        # sin archivo se usan los defaults; una ruta explícita debe existir
        if path or os.environ.get(CONFIG_ENV):
            raise DatasetIOError("archivo de configuración inexistente", target)
        return {}
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"config inválida en {target}: {e}")


def save_config(cfg: Dict, path: Optional[str] = None) -> None:
    """Guarda la configuración en config.json."""
    target = config_path(path)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, ensure_ascii=False)


def get_section(name: str, cfg: Optional[Dict] = None) -> Dict[str, Any]:
    """Devuelve una sección con los valores por defecto completados."""
    if cfg is None:
        cfg = load_config()
    section = copy.deepcopy(DEFAULTS.get(name, {}))
    section.update(cfg.get(name, {}) or {})
    return section


def deep_update(base: Dict, overrides: Dict) -> Dict:
    """Mezcla recursiva; los overrides ganan."""
    out = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            current = out.get(key)
            out[key] = deep_update(current if isinstance(current, dict) else {}, value)
        elif value is not None:
            out[key] = value
    return out


# ============================================================
# PipelineConfig
# ============================================================

@dataclass
class PipelineConfig:
    """Configuración completa del pipeline: todas las secciones + rutas."""

    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    source: Optional[str] = None

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict] = None) -> "PipelineConfig":
        raw = load_config(path)
        raw = deep_update(raw, overrides or {})
        sections = {name: get_section(name, raw) for name in DEFAULTS}
        return cls(sections=sections, source=str(config_path(path)))

    def __getitem__(self, name: str) -> Dict[str, Any]:
        return self.sections[name]

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.sections)

    def validate(self, require_paths=()) -> None:
        """Valida invariantes numéricos de cada módulo antes de escribir nada."""
        cam = self.sections["camera"]
        if cam["fx"] <= 0 or cam["fy"] <= 0:
            raise InvalidInputError("camera: fx y fy deben ser > 0")
        if not (0 <= cam["cx"] < cam["width"] and 0 <= cam["cy"] < cam["height"]):
            raise InvalidInputError("camera: punto principal fuera de la imagen")

        losses = self.sections["losses"]
        for key in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if losses[key] < 0:
                raise InvalidInputError(f"losses.{key} debe ser >= 0")
        if losses["norm_metric"] not in ("l1", "angular"):
            raise InvalidInputError("losses.norm_metric debe ser 'l1' o 'angular'")

        if self.sections["illumination"]["mu"] < 0:
            raise InvalidInputError("illumination.mu debe ser >= 0")

        ref = self.sections["refinement"]
        if int(ref["iterations"]) < 1:
            raise InvalidInputError("refinement.iterations debe ser >= 1")
        if int(ref["base_resolution"]) < 3:
            raise InvalidInputError("refinement.base_resolution debe ser >= 3")
        for key in ("w_shading", "w_prior", "w_smooth", "lambda1", "lambda2"):
            if ref[key] < 0:
                raise InvalidInputError(f"refinement.{key} debe ser >= 0")
        if int(ref["photometric_evaluations"]) < 0:
            raise InvalidInputError("refinement.photometric_evaluations debe ser >= 0")

        ph = self.sections["phantom"]
        if ph["radius"] <= 0:
            raise InvalidInputError("phantom.radius debe ser > 0")
        if not (0 <= ph["fold_amplitude"] < 1):
            raise InvalidInputError("phantom.fold_amplitude debe estar en [0, 1)")
        if ph["fold_wavelength"] <= 0:
            raise InvalidInputError("phantom.fold_wavelength debe ser > 0")

        traj = self.sections["trajectory"]
        if traj["view"] not in ("down-the-barrel", "en-face"):
            raise InvalidInputError("trajectory.view debe ser 'down-the-barrel' o 'en-face'")
        if int(traj["frames"]) < 1:
            raise InvalidInputError("trajectory.frames debe ser >= 1")

        rnd = self.sections["render"]
        if int(rnd["max_steps"]) < 1 or not (0 < rnd["relaxation"] <= 1):
            raise InvalidInputError("render: max_steps >= 1 y relaxation en (0, 1]")
        if int(rnd["specular_spots"]) < 0:
            raise InvalidInputError("render.specular_spots debe ser >= 0")

        fus = self.sections["fusion"]
        if fus["truncation_voxels"] <= 1:
            raise InvalidInputError("fusion.truncation_voxels debe ser > 1")

        ev = self.sections["evaluation"]
        if not (0 < ev["scale_low"] < ev["scale_high"]):
            raise InvalidInputError("evaluation: rango de escala inválido")
        if int(ev["folds"]) < 1:
            raise InvalidInputError("evaluation.folds debe ser >= 1")

        for key in require_paths:
            p = Path(self.sections["paths"][key])
            if not p.exists():
                raise InvalidInputError(f"paths.{key} no existe: {p}")
