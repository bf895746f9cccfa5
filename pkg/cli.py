# cli.py - Línea de comandos de colon_recon (render / losses / refine / fuse / evaluate / report)
"""
Ejemplos:
    python cli.py render --out data/scene
    python cli.py losses --dataset data/scene --pair 000000 000001 --dump-maps
    python cli.py refine --dataset data/scene --init flat --iterations 4 --out runs/flat4
    python cli.py fuse --frames runs/flat4 --voxel-size 0.02 --out runs/flat4/mesh
    python cli.py evaluate --pred runs/flat4 --gt data/scene --report runs/flat4.json
    python cli.py report runs/flat4.json runs/flat1.json

Exit codes: 0 ok, 1 validación, 2 soporte vacío / datos degenerados, 3 IO.
"""
import argparse
import sys
from typing import Any, Dict, List, Optional

from colon_recon.errors import InvalidInputError, exit_code_for
from colon_recon.pipeline import cmd_evaluate, cmd_fuse, cmd_losses, cmd_refine, cmd_render, cmd_report
from colon_recon.utils import PipelineConfig


class _Parser(argparse.ArgumentParser):
    """Los errores de uso son entrada inválida (exit 1), no el 2 de argparse."""

    def error(self, message):
        raise InvalidInputError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(description="Reconstrucción de colon basada en normales (toolkit determinista)")
    parser.add_argument("--config", default=None, help="config.json (por defecto $COLON_RECON_CONFIG o el de la raíz)")
    parser.add_argument("--jobs", type=int, default=1, help="Frames en paralelo")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="Renderiza un dataset del fantoma")
    p.add_argument("--out", default=None, help="Directorio del dataset")
    p.add_argument("--view", choices=("down-the-barrel", "en-face"), default=None)
    p.add_argument("--frames", type=int, default=None, help="Cantidad de frames")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fold-amplitude", type=float, default=None)

    p = sub.add_parser("losses", help="Evalúa L_init sobre un par de frames")
    p.add_argument("--dataset", default=None)
    p.add_argument("--pair", nargs=2, metavar=("T", "S"), required=True)
    p.add_argument("--dump-maps", action="store_true", help="Escribe los mapas por píxel como PFM")
    p.add_argument("--no-norm", action="store_true", help="Ablación sin L_norm (λ1 = 0)")
    p.add_argument("--norm-metric", choices=("l1", "angular"), default=None)
    for i in range(1, 5):
        p.add_argument(f"--lambda{i}", type=float, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("refine", help="Refinamiento n×NR por frame")
    p.add_argument("--dataset", default=None)
    p.add_argument("--init", default="flat", help="flat | corrupted | ruta a PFM o directorio")
    p.add_argument("--iterations", type=int, default=None, help="n (>= 1)")
    p.add_argument("--frames", nargs="*", default=None, help="Ids de frame (por defecto todos)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("fuse", help="Fusión TSDF + malla + cobertura")
    p.add_argument("--frames", default=None, help="Directorio con depth/, trajectory.txt, intrinsics.json")
    p.add_argument("--voxel-size", type=float, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("evaluate", help="Métricas de profundidad y Chamfer")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", default=None, help="Ruta del reporte JSON")
    p.add_argument("--name", default=None, help="Nombre de la fila en la tabla")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--no-chamfer", action="store_true")

    p = sub.add_parser("report", help="Tabla a partir de reportes de evaluación")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=None)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags del CLI → secciones de configuración (los flags ganan al archivo)."""
    cmd = args.command
    if cmd == "render":
        return {"trajectory": {"view": args.view, "frames": args.frames, "seed": args.seed},
                "phantom": {"fold_amplitude": args.fold_amplitude}}
    if cmd == "losses":
        losses = {f"lambda{i}": getattr(args, f"lambda{i}") for i in range(1, 5)}
        losses["norm_metric"] = args.norm_metric
        return {"losses": losses}
    if cmd == "refine":
        return {"refinement": {"iterations": args.iterations}}
    if cmd == "evaluate":
        return {"evaluation": {"folds": args.folds}}
    return {}


def run(args: argparse.Namespace) -> Dict[str, Any]:
    if args.command == "report":
        return cmd_report(args.reports, args.out)
    config = PipelineConfig.load(args.config, _overrides(args))
    if args.command == "render":
        return cmd_render(config, args.out, jobs=args.jobs)
    if args.command == "losses":
        target, source = args.pair
        return cmd_losses(config, args.dataset, target, source, args.out,
                          dump_maps=args.dump_maps, no_norm=args.no_norm)
    if args.command == "refine":
        return cmd_refine(config, args.dataset, args.out, init=args.init, frames=args.frames, jobs=args.jobs)
    if args.command == "fuse":
        return cmd_fuse(config, args.frames, args.out, voxel_size=args.voxel_size)
    return cmd_evaluate(config, args.pred, args.gt, args.report, name=args.name, chamfer=not args.no_chamfer)


def main(argv: Optional[List[str]] = None) -> int:
    command = "cli"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        result = run(args)
    except Exception as e:
        code = exit_code_for(e)
        print(f"[cli] {command} falló ({type(e).__name__}): {e}", file=sys.stderr)
        try:
            from logger import printTerminal
            printTerminal("error", f"{command}: {e}")
        except ImportError:
            pass
        return code
    print(f"[cli] {result['message']}")
    if args.command == "report":
        print(result["table"], end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
