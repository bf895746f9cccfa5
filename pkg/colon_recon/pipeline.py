# pipeline.py - Comandos reproducibles: render, losses, refine, fuse, evaluate, report
"""
Cada cmd_* valida la configuración antes de escribir nada, procesa frame a
frame (hilos con jobs > 1, resultados fusionados en orden fijo) y devuelve
un diccionario {"ok": True, "message": ..., ...}. Los errores se propagan
como ColonReconError con el id de frame en el mensaje.

Layout de un dataset (render) o de un directorio de predicciones (refine):

    manifest.json  intrinsics.json  trajectory.txt
    rgb/<id>.png   depth/<id>.pfm   normals/<id>.pfm
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ColonReconError, DatasetIOError, InvalidInputError
from .evaluation import (
    TABLE_HEADER, aggregate_folds, depth_metrics, mean_metrics, mesh_chamfer, split_folds, table_row,
)
from .formats import (
    read_depth, read_intrinsics, read_json, read_normals, read_png, read_trajectory,
    write_depth, write_energy_csv, write_gray_png, write_intrinsics, write_json, write_light_field,
    write_mesh, write_normals, write_png, write_scalar_map, write_text, write_trajectory,
)
from .fusion import coverage_holes, extract_mesh, fuse_tsdf
from .geometry import DepthMap, Intrinsics, Pose, relative_pose, resize_depth, resize_normals
from .losses import LossInputs, LossWeights, SourceView, loss_init_total
from .phantom import Phantom, inject_specular, make_phantom, make_trajectory, render_frame
from .refinement import RefinementConfig, corrupted_init, flat_init, refine_multiscale
from .utils import PipelineConfig

MANIFEST = "manifest.json"
INTRINSICS = "intrinsics.json"
TRAJECTORY = "trajectory.txt"
INIT_CHOICES = ("flat", "corrupted")


def _log(log_type: str, message: str) -> None:
    try:
        from logger import printTerminal
        printTerminal(log_type, message)
    except ImportError:
        print(f"[{log_type}] {message}")


def _map_frames(fn: Callable, items: Sequence, jobs: int = 1) -> List:
    """Aplica fn a cada frame; con jobs > 1 usa hilos pero conserva el orden de entrada."""
    items = list(items)
    if int(jobs) <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
        return list(pool.map(fn, items))


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"no se pudo crear el directorio de salida: {e}", path)
    return path


# ============================================================
# Dataset en disco
# ============================================================

@dataclass
class Dataset:
    root: Path
    intrinsics: Intrinsics
    poses: Dict[str, Pose]
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def frame_ids(self) -> List[str]:
        return sorted(self.poses)

    def depth_ids(self) -> List[str]:
        """Frames con profundidad en disco y pose en la trayectoria."""
        folder = self.root / "depth"
        if not folder.is_dir():
            return []
        return sorted(p.stem for p in folder.glob("*.pfm") if p.stem in self.poses)

    def require(self, frame_id: str) -> None:
        if frame_id not in self.poses:
            raise InvalidInputError(f"frame inexistente en {self.root}: {frame_id}")

    def image(self, frame_id: str):
        return read_png(self.root / "rgb" / f"{frame_id}.png")

    def depth(self, frame_id: str) -> DepthMap:
        return read_depth(self.root / "depth" / f"{frame_id}.pfm")

    def normals(self, frame_id: str):
        return read_normals(self.root / "normals" / f"{frame_id}.pfm")

    def phantom(self) -> Optional[Phantom]:
        params = self.manifest.get("phantom")
        return make_phantom(params) if params else None


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetIOError("directorio de dataset inexistente", root)
    manifest = read_json(root / MANIFEST) if (root / MANIFEST).exists() else {}
    intrinsics = read_intrinsics(root / INTRINSICS)
    poses = dict(read_trajectory(root / TRAJECTORY))
    return Dataset(root, intrinsics, poses, manifest)


def _write_frame_index(out: Path, dataset: Dataset, frame_ids: Sequence[str], manifest: Dict[str, Any]) -> None:
    write_intrinsics(out / INTRINSICS, dataset.intrinsics)
    write_trajectory(out / TRAJECTORY, [(fid, dataset.poses[fid]) for fid in frame_ids])
    write_json(out / MANIFEST, manifest)


# ============================================================
# render
# ============================================================

def cmd_render(config: PipelineConfig, out_dir=None, jobs: int = 1) -> Dict[str, Any]:
    """Renderiza el fantoma sobre la trayectoria configurada: RGB + profundidad + normales + poses."""
    config.validate()
    phantom = make_phantom(config["phantom"])
    intrinsics = Intrinsics.from_dict(config["camera"])
    traj_cfg = config["trajectory"]
    render_cfg = config["render"]
    mu = float(config["illumination"]["mu"])
    seed = int(traj_cfg["seed"])
    trajectory = make_trajectory(phantom, traj_cfg["view"], int(traj_cfg["frames"]), seed=seed,
                                 start=float(traj_cfg["start"]), step=float(traj_cfg["step"]),
                                 jitter=float(traj_cfg["jitter"]))
    outside = [fid for (fid, _), d in zip(trajectory.frames, phantom.sdf(trajectory.centers())) if d >= 0]
    if outside:
        raise InvalidInputError(f"cámaras fuera del fantoma: {outside}")

    out = _mkdir(Path(out_dir or config["paths"]["dataset"]))
    spots = int(render_cfg["specular_spots"])

    def render_one(item):
        index, (fid, pose) = item
        try:
            image, depth, normals = render_frame(phantom, pose, intrinsics, mu,
                                                 max_steps=int(render_cfg["max_steps"]),
                                                 relaxation=float(render_cfg["relaxation"]))
        except ColonReconError as e:
            raise e.with_context(f"frame {fid}") from e
        if spots > 0:
            image, _ = inject_specular(image, spots, seed=seed + index)
        write_png(out / "rgb" / f"{fid}.png", image)
        write_depth(out / "depth" / f"{fid}.pfm", depth)
        write_normals(out / "normals" / f"{fid}.pfm", normals)
        return fid, int(depth.validity.sum())

    results = _map_frames(render_one, list(enumerate(trajectory.frames)), jobs)
    frame_ids = [fid for fid, _ in results]
    write_intrinsics(out / INTRINSICS, intrinsics)
    write_trajectory(out / TRAJECTORY, trajectory.frames)
    write_json(out / MANIFEST, {
        "source": "render",
        "frames": frame_ids,
        "view": trajectory.view,
        "seed": seed,
        "mu": mu,
        "specular_spots": spots,
        "phantom": phantom.to_dict(),
        "camera": intrinsics.to_dict(),
        "layout": {"rgb": "rgb/{id}.png", "depth": "depth/{id}.pfm", "normals": "normals/{id}.pfm"},
    })
    empty = [fid for fid, n in results if n == 0]
    if empty:
        _log("warning", f"frames sin superficie visible: {empty}")
    _log("render", f"{len(frame_ids)} frames {trajectory.view} renderizados en {out}")
    return {"ok": True, "message": f"{len(frame_ids)} frames renderizados en {out}",
            "frames": frame_ids, "output": str(out)}


# ============================================================
# losses
# ============================================================

def cmd_losses(config: PipelineConfig, dataset_dir, target: str, source: str, out_dir=None,
               dump_maps: bool = False, no_norm: bool = False) -> Dict[str, Any]:
    """L^init del par (target, source) con GT de profundidad, normales y poses del dataset."""
    config.validate()
    if target == source:
        raise InvalidInputError("el par requiere dos frames distintos")
    ds = load_dataset(dataset_dir or config["paths"]["dataset"])
    ds.require(target)
    ds.require(source)

    loss_cfg = config["losses"]
    weights = LossWeights.from_config(loss_cfg)
    if no_norm:
        weights = weights.without_norm()
    view = SourceView(ds.image(source), ds.depth(source), ds.normals(source),
                      relative_pose(ds.poses[target], ds.poses[source]))
    inputs = LossInputs(ds.image(target), ds.depth(target), ds.normals(target), [view], ds.intrinsics,
                        specular_threshold=float(loss_cfg["specular_threshold"]),
                        norm_metric=loss_cfg["norm_metric"])
    try:
        report, maps = loss_init_total(inputs, weights, return_maps=True)
    except ColonReconError as e:
        raise e.with_context(f"par {target}/{source}") from e

    out = _mkdir(Path(out_dir or config["paths"]["output"]))
    report_path = out / f"losses_{target}_{source}.json"
    write_json(report_path, {"target": target, "source": source,
                             "report": report.to_dict(), "weights": asdict(weights)})
    dumped = []
    if dump_maps:
        for name in sorted(maps):
            path = out / "maps" / f"{target}_{source}_{name}.pfm"
            write_scalar_map(path, maps[name])
            dumped.append(str(path))
    _log("losses", f"par {target}/{source}: total {report.total:.6g} sobre {report.pixel_count} píxeles")
    return {"ok": True, "message": f"L_init = {report.total:.6g}", "report": report.to_dict(),
            "path": str(report_path), "maps": dumped}


# ============================================================
# refine
# ============================================================

def _file_init(path: Path, frame_id: str) -> DepthMap:
    """Un .pfm se usa para todos los frames; un directorio aporta depth/<id>.pfm o <id>.pfm."""
    if path.is_file():
        return read_depth(path)
    for candidate in (path / "depth" / f"{frame_id}.pfm", path / f"{frame_id}.pfm"):
        if candidate.exists():
            return read_depth(candidate)
    raise DatasetIOError(f"sin profundidad inicial para el frame {frame_id}", path)


def _initial_depth(init: str, frame_id: str, gt: DepthMap, intrinsics: Intrinsics, seed: int) -> DepthMap:
    if init == "flat":
        return flat_init(intrinsics)
    if init == "corrupted":
        return corrupted_init(gt, seed=seed)
    depth = _file_init(Path(init), frame_id)
    if depth.shape != intrinsics.shape:
        depth = resize_depth(depth, intrinsics.width, intrinsics.height)
    return depth


def cmd_refine(config: PipelineConfig, dataset_dir, out_dir=None, init: str = "flat",
               frames: Optional[Sequence[str]] = None, jobs: int = 1) -> Dict[str, Any]:
    """n×NR por frame desde flat | corrupted | FILE; escribe salidas por iteración y métricas antes/después."""
    config.validate()
    refine_cfg = RefinementConfig.from_config(config["refinement"], mu=config["illumination"]["mu"])
    ds = load_dataset(dataset_dir or config["paths"]["dataset"])
    frame_ids = list(frames) if frames else ds.frame_ids
    for fid in frame_ids:
        ds.require(fid)
    if init not in INIT_CHOICES and not Path(init).exists():
        raise DatasetIOError("fuente de inicialización inexistente", init)
    init_name = init if init in INIT_CHOICES else Path(init).name

    out = _mkdir(Path(out_dir or config["paths"]["output"]))
    K = ds.intrinsics
    seed = int(config["trajectory"]["seed"])

    def refine_one(item):
        index, fid = item
        try:
            image = ds.image(fid)
            gt = ds.depth(fid)
            start = _initial_depth(init, fid, gt, K, seed + index)
            state = refine_multiscale(image, start, K, refine_cfg)
            final = resize_depth(state.depth, K.width, K.height)
            before = depth_metrics(start, gt)
            after = depth_metrics(final, gt)
        except ColonReconError as e:
            raise e.with_context(f"frame {fid}") from e

        frame_dir = out / "iterations" / fid
        for i, (d_i, n_i, lf_i) in enumerate(zip(state.pred_depths, state.pred_normals, state.light_fields)):
            write_depth(frame_dir / f"iter{i + 1}_depth.pfm", d_i)
            write_normals(frame_dir / f"iter{i + 1}_normals.pfm", n_i)
            write_light_field(frame_dir / f"iter{i + 1}_light", lf_i)
        write_energy_csv(frame_dir / "energy.csv", state.energy_rows())
        write_depth(out / "depth" / f"{fid}.pfm", final)
        write_normals(out / "normals" / f"{fid}.pfm", resize_normals(state.normals, K.width, K.height))
        print(f"[refine] frame {fid}: RMSE {before.rmse:.6g} → {after.rmse:.6g}")
        return fid, before, after

    results = _map_frames(refine_one, list(enumerate(frame_ids)), jobs)

    per_frame = {fid: {"before": b.to_dict(), "after": a.to_dict(), "rmse_delta": a.rmse - b.rmse}
                 for fid, b, a in results}
    reductions = [1.0 - a.rmse / b.rmse for _, b, a in results if b.rmse > 0]
    summary = {
        "init": init_name,
        "iterations": refine_cfg.iterations,
        "frames": per_frame,
        "median_rmse_reduction": float(np.median(reductions)) if reductions else None,
    }
    write_json(out / "refine_report.json", summary)
    _write_frame_index(out, ds, frame_ids, {
        "source": "refine",
        "frames": frame_ids,
        "init": init_name,
        "iterations": refine_cfg.iterations,
        "phantom": ds.manifest.get("phantom"),
    })
    _log("refine", f"{len(frame_ids)} frames refinados ({init_name}, n={refine_cfg.iterations})")
    return {"ok": True, "message": f"{len(frame_ids)} frames refinados en {out}",
            "report": summary, "output": str(out)}


# ============================================================
# fuse
# ============================================================

def _fusion_kwargs(config: PipelineConfig, voxel_size: Optional[float]) -> Dict[str, Any]:
    fus = config["fusion"]
    size = voxel_size if voxel_size is not None else fus.get("voxel_size")
    return {"voxel_fraction": float(fus["voxel_fraction"]),
            "truncation_voxels": float(fus["truncation_voxels"]),
            "voxel_size": None if size is None else float(size)}


def cmd_fuse(config: PipelineConfig, frames_dir, out_dir=None, voxel_size: Optional[float] = None) -> Dict[str, Any]:
    """TSDF con poses conocidas → mesh.ply; sobre un render también cobertura y huecos."""
    config.validate()
    if voxel_size is not None and not voxel_size > 0:
        raise InvalidInputError(f"voxel_size debe ser > 0: {voxel_size}")
    ds = load_dataset(frames_dir or config["paths"]["dataset"])
    frame_ids = ds.depth_ids()
    if not frame_ids:
        raise InvalidInputError(f"sin profundidades en {ds.root / 'depth'}")
    out = _mkdir(Path(out_dir or config["paths"]["output"]))

    frames = [(ds.depth(fid), ds.poses[fid]) for fid in frame_ids]
    grid = fuse_tsdf(frames, ds.intrinsics, **_fusion_kwargs(config, voxel_size))
    mesh = extract_mesh(grid)
    result = {"ok": True, "frames": frame_ids, "voxel_size": grid.voxel_size,
              "vertices": int(len(mesh.vertices)), "triangles": int(len(mesh.triangles))}
    if mesh.is_empty:
        _log("warning", f"fusión sin superficie en {ds.root}")
    else:
        write_mesh(out / "mesh.ply", mesh)

    # la cobertura compara contra la geometría del fantoma: sólo con profundidad renderizada
    phantom = ds.phantom()
    if phantom is not None and ds.manifest.get("source") == "render":
        cov_cfg = config["coverage"]
        coverage = coverage_holes(frames, ds.intrinsics, phantom,
                                  cells_u=int(cov_cfg["cells_u"]), cells_theta=int(cov_cfg["cells_theta"]),
                                  depth_tolerance=float(cov_cfg["depth_tolerance"]),
                                  incidence_degrees=float(cov_cfg["incidence_degrees"]))
        write_gray_png(out / "coverage.png", coverage.observed.astype(np.float64))
        write_json(out / "holes.json", coverage.to_dict())
        result["coverage"] = coverage.coverage
        result["holes"] = len(coverage.holes)

    _log("fusion", f"{len(frame_ids)} frames fusionados, {result['triangles']} triángulos")
    result["message"] = f"malla con {result['triangles']} triángulos en {out}"
    return result


# ============================================================
# evaluate
# ============================================================

def _fused_mesh(ds: Dataset, frame_ids: Sequence[str], fusion_kwargs: Dict[str, Any],
                reference: Optional[Dataset] = None):
    """Malla fusionada; con referencia, cada profundidad se lleva a la escala mediana del GT."""
    frames = []
    for fid in frame_ids:
        depth = ds.depth(fid)
        if reference is not None:
            gt = reference.depth(fid)
            if depth.shape != gt.shape:
                depth = resize_depth(depth, gt.shape[1], gt.shape[0])
            depth = depth.scaled(depth_metrics(depth, gt).scale_applied)
        frames.append((depth, ds.poses[fid]))
    intrinsics = reference.intrinsics if reference is not None else ds.intrinsics
    return extract_mesh(fuse_tsdf(frames, intrinsics, **fusion_kwargs))


def _chamfer(pred: Dataset, gt: Dataset, frame_ids: Sequence[str], config: PipelineConfig) -> float:
    ev = config["evaluation"]
    kwargs = _fusion_kwargs(config, None)
    mesh_gt = _fused_mesh(gt, frame_ids, kwargs)
    mesh_pred = _fused_mesh(pred, frame_ids, kwargs, reference=gt)
    result = mesh_chamfer(mesh_gt, mesh_pred,
                          np.array([gt.poses[f].center for f in frame_ids]),
                          np.array([pred.poses[f].center for f in frame_ids]),
                          samples=int(ev["samples"]), seed=int(ev["seed"]),
                          low=float(ev["scale_low"]), high=float(ev["scale_high"]), tol=float(ev["scale_tol"]))
    return result["chamfer"]


def cmd_evaluate(config: PipelineConfig, pred_dir, gt_dir, report_path=None, name: Optional[str] = None,
                 chamfer: bool = True) -> Dict[str, Any]:
    """Métricas por frame, media ± desvío entre folds y Chamfer sobre mallas fusionadas."""
    config.validate()
    pred = load_dataset(pred_dir)
    gt = load_dataset(gt_dir)
    pred_ids, gt_ids = pred.depth_ids(), gt.depth_ids()
    if pred_ids != gt_ids:
        only_pred = sorted(set(pred_ids) - set(gt_ids))
        only_gt = sorted(set(gt_ids) - set(pred_ids))
        raise InvalidInputError(f"conjuntos de frames distintos: sólo en pred {only_pred}, sólo en gt {only_gt}")
    if not gt_ids:
        raise InvalidInputError("no hay frames para evaluar")

    per_frame = {}
    for fid in gt_ids:
        gt_depth = gt.depth(fid)
        depth = pred.depth(fid)
        if depth.shape != gt_depth.shape:
            depth = resize_depth(depth, gt_depth.shape[1], gt_depth.shape[0])
        try:
            per_frame[fid] = depth_metrics(depth, gt_depth)
        except ColonReconError as e:
            raise e.with_context(f"frame {fid}") from e

    folds = split_folds(gt_ids, int(config["evaluation"]["folds"]))
    fold_values = [mean_metrics([per_frame[f] for f in fold]) for fold in folds]
    if chamfer:
        # Procrustes necesita al menos 3 centros de cámara por fold
        if all(len(fold) >= 3 for fold in folds):
            for fold, values in zip(folds, fold_values):
                values["chamfer"] = _chamfer(pred, gt, fold, config)
        else:
            sequence = _chamfer(pred, gt, gt_ids, config)
            for values in fold_values:
                values["chamfer"] = sequence
    aggregate = aggregate_folds(fold_values)

    label = name or Path(pred_dir).name
    row = table_row(label, aggregate)
    report = {
        "name": label,
        "frames": gt_ids,
        "per_frame": {fid: m.to_dict() for fid, m in per_frame.items()},
        "folds": [dict(values, frames=list(fold)) for fold, values in zip(folds, fold_values)],
        "aggregate": {k: {"mean": m, "std": s} for k, (m, s) in aggregate.items()},
        "row": row,
    }
    path = Path(report_path) if report_path else Path(config["paths"]["output"]) / "evaluation.json"
    write_json(path, report)
    _log("evaluate", f"{label}: {row}")
    return {"ok": True, "message": row, "report": report, "path": str(path)}


# ============================================================
# report
# ============================================================

def cmd_report(report_paths: Sequence, out_path=None) -> Dict[str, Any]:
    """Une reportes de evaluación en una tabla de filas media ± desvío."""
    if not report_paths:
        raise InvalidInputError("report requiere al menos un reporte de evaluación")
    lines = [TABLE_HEADER]
    for path in report_paths:
        data = read_json(path)
        if "aggregate" not in data:
            raise InvalidInputError(f"no es un reporte de evaluación: {path}")
        aggregate = {k: (v["mean"], v["std"]) for k, v in data["aggregate"].items()}
        lines.append(table_row(data.get("name", Path(path).stem), aggregate))
    table = "\n".join(lines) + "\n"
    if out_path:
        write_text(out_path, table)
    return {"ok": True, "message": f"{len(lines) - 1} filas", "table": table}
