"""Entry point and orchestration for the inverse-rendering pipeline."""

import argparse
import logging
import platform
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from config import RunConfig, configure_torch, load_config, thread_cap
from core.ingest import initial_scene, load_dataset
from core.ledger import atomic_rewrite_json, file_hash
from core.losses import encode_normals
from core.maps_io import write_map, write_preview
from core.metrics import evaluate_dataset, report_value
from core.optimize import latest_checkpoint, run_schedule
from core.render import (
    MODES,
    RenderedMaps,
    blend_weights,
    render_frame,
    render_view,
    trace_sky_visibility,
)
from core.scene_io import load_illumination, load_rig, load_scene, save_scene, write_pointcloud
from core.scenegraph import DTYPE, SceneGraph, SensorRig, instantiate
from core.shading import fs_table, ggx_normalization, specularity_profile, specularity_ratio
from core.synth import SynthSpec, TEMPLATES, generate, load_spotlights, night_sim, relight
from core.validator import (
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    DataError,
    InvrlError,
    NumericError,
    validate_scene,
)
from core.visibility import hemisphere_directions
from paths import DEFAULT_CONFIG_PATH, DatasetLayout, RunLayout

logger = logging.getLogger("invrl")

PACKAGES = ("numpy", "scipy", "torch", "imageio", "python-dotenv", "tqdm")
ERROR_PREFIX = {
    ConfigError: "Configuration error",
    DataError: "Data error",
    NumericError: "Numeric failure",
}


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def input_hashes(paths: list[Path]) -> dict[str, str]:
    """sha256 fingerprints of every input file (directories are walked)."""
    hashes: dict[str, str] = {}
    for path in paths:
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file()):
                hashes[str(child)] = file_hash(child)
        elif path.exists():
            hashes[str(path)] = file_hash(path)
    return hashes


def write_run_artifacts(out: Path, command: str, config: RunConfig, inputs: list[Path], outputs: list[str]) -> None:
    """Echo the effective config and write manifest.json into out."""
    layout = RunLayout(out)
    atomic_rewrite_json(layout.config_echo, config.to_dict())
    atomic_rewrite_json(layout.manifest, {
        "command": command,
        "config_hash": config.config_hash(),
        "inputs": input_hashes(inputs),
        "versions": package_versions(),
        "outputs": outputs,
    })


def write_maps(layout: RunLayout, idx: int, maps: RenderedMaps) -> list[str]:
    arrays = maps.numpy()
    layout.maps_dir.mkdir(parents=True, exist_ok=True)
    named = {
        "color": arrays["color"],
        "normal": encode_normals(arrays["normal"]),
        "albedo": arrays["rgb_albedo"],
        "rough": arrays["roughness"],
        "lidar_albedo": arrays["lidar_albedo"],
        "intensity": arrays["lidar_intensity"],
        "mask": arrays["lidar_mask"],
        "alpha": arrays["alpha"],
    }
    written = []
    for kind, image in named.items():
        path = layout.render_map(idx, kind)
        write_map(path, image)
        written.append(str(path))
    return written


def for_each_frame(rig: SensorRig, job: Callable[[int], Any]) -> list[Any]:
    """Run job over frame indices in a pool capped by INVRL_THREADS, in frame order."""
    with ThreadPoolExecutor(max_workers=thread_cap() or 1) as pool:
        return list(pool.map(job, range(len(rig))))


def _load_scene_checked(path: str) -> SceneGraph:
    scene = load_scene(path)
    validate_scene(scene)
    return scene


def _load_rig(data: str) -> SensorRig:
    layout = DatasetLayout(Path(data))
    return load_rig(layout.rig_path, layout.poses_path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_invert(args: argparse.Namespace, config: RunConfig) -> int:
    data_dir = args.data or config.data_dir
    out_dir = args.out or config.out_dir
    if not data_dir or not out_dir:
        raise ConfigError("invert needs --data and --out (or data_dir/out_dir in the config)")
    dataset = load_dataset(data_dir, config)
    layout = RunLayout(Path(out_dir))
    layout.ensure_dirs()
    atomic_rewrite_json(layout.config_echo, config.to_dict())

    resume = args.resume
    if resume == "auto":
        found = latest_checkpoint(layout)
        resume = str(found) if found is not None else None
    scene = _load_scene_checked(args.init_scene) if args.init_scene else initial_scene(dataset, config)
    print(f"status=start frames={len(dataset)} primitives={scene.primitive_count()} resume={resume or 'none'}")

    final, log = run_schedule(scene, dataset, config, layout, resume=resume, progress=not args.no_progress)
    outputs = [str(layout.final_scene), str(layout.loss_log)]
    if args.render_final:
        for frame in dataset.frames:
            maps = render_frame(final, dataset.rig, frame.timestamp, "final", config)
            outputs += write_maps(layout, frame.index, maps)
    last = log[-1]["total"] if log else float("nan")
    print(f"status=done iterations={len(log)} total={last:.6g} scene={layout.final_scene}")
    write_run_artifacts(layout.root, "invert", config, [Path(data_dir)], outputs)
    return EXIT_OK


def cmd_render(args: argparse.Namespace, config: RunConfig) -> int:
    scene = _load_scene_checked(args.scene)
    rig = _load_rig(args.data)
    layout = RunLayout(Path(args.out))
    layout.root.mkdir(parents=True, exist_ok=True)

    def job(idx: int) -> list[str]:
        maps = render_frame(scene, rig, rig.timestamps[idx], args.mode, config, args.color_path)
        return write_maps(layout, idx, maps)

    outputs = [path for paths in for_each_frame(rig, job) for path in paths]
    print(f"status=done frames={len(rig)} mode={args.mode} out={layout.maps_dir}")
    write_run_artifacts(layout.root, "render", config, [Path(args.scene), Path(args.data) / "rig.json", Path(args.data) / "poses.txt"], outputs)
    return EXIT_OK


def cmd_simulate_lidar(args: argparse.Namespace, config: RunConfig) -> int:
    scene = _load_scene_checked(args.scene)
    rig = _load_rig(args.data)
    layout = RunLayout(Path(args.out))
    points_layout = DatasetLayout(layout.root)
    points_layout.lidar_dir.mkdir(parents=True, exist_ok=True)
    layout.maps_dir.mkdir(parents=True, exist_ok=True)

    def job(idx: int) -> list[str]:
        gaussians = instantiate(scene, rig.timestamps[idx])
        with torch.no_grad():
            maps = render_view(gaussians, rig, idx, scene.illumination, config, 1, color_path="radiance", simulate_lidar=True)
        arrays = maps.numpy()
        written = []
        for kind, name in (("intensity", "lidar_intensity"), ("lidar_albedo", "lidar_albedo"), ("mask", "lidar_mask")):
            path = layout.render_map(idx, kind)
            write_map(path, arrays[name])
            written.append(str(path))
        points = points_layout.lidar_points(idx)
        write_pointcloud(points, maps.returns)
        print(f"frame={idx} returns={maps.returns.shape[0]}")
        return written + [str(points)]

    outputs = [path for paths in for_each_frame(rig, job) for path in paths]
    write_run_artifacts(layout.root, "simulate-lidar", config, [Path(args.scene), Path(args.data) / "rig.json", Path(args.data) / "poses.txt"], outputs)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    spec = SynthSpec.from_config(args.template, config)
    layout = generate(spec, args.out, config)
    print(f"status=done template={spec.template} frames={spec.num_frames} out={layout.root}")
    write_run_artifacts(layout.root, "synth", config, [], [str(layout.root)])
    return EXIT_OK


def cmd_relight(args: argparse.Namespace, config: RunConfig) -> int:
    scene = _load_scene_checked(args.scene)
    illum = load_illumination(args.illum)
    relit = relight(scene, illum, config)
    layout = RunLayout(Path(args.out))
    layout.root.mkdir(parents=True, exist_ok=True)
    scene_path = layout.root / "scene_relit.txt"
    save_scene(scene_path, relit)
    outputs = [str(scene_path)]
    inputs = [Path(args.scene), Path(args.illum)]
    if args.data:
        rig = _load_rig(args.data)
        outputs += [
            path
            for paths in for_each_frame(rig, lambda idx: write_maps(layout, idx, render_frame(relit, rig, rig.timestamps[idx], "final", config)))
            for path in paths
        ]
        inputs.append(Path(args.data) / "poses.txt")
    print(f"status=done scene={scene_path}")
    write_run_artifacts(layout.root, "relight", config, inputs, outputs)
    return EXIT_OK


def cmd_night(args: argparse.Namespace, config: RunConfig) -> int:
    scene = _load_scene_checked(args.scene)
    lights = load_spotlights(args.lights, config)
    rig = _load_rig(args.data)
    layout = RunLayout(Path(args.out))
    layout.root.mkdir(parents=True, exist_ok=True)

    def job(idx: int) -> list[str]:
        maps = night_sim(scene, lights, rig, rig.timestamps[idx], config)
        return write_maps(layout, idx, maps)

    outputs = [path for paths in for_each_frame(rig, job) for path in paths]
    print(f"status=done frames={len(rig)} spotlights={len(lights)} out={layout.maps_dir}")
    write_run_artifacts(layout.root, "night", config, [Path(args.scene), Path(args.lights)], outputs)
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace, config: RunConfig) -> int:
    report = evaluate_dataset(args.pred, args.gt, args.out)
    means = " ".join(f"{k}={v}" for k, v in report["mean"].items())
    print(f"status=done frames={len(report['frames'])} {means}")
    out = Path(args.out).parent if args.out else Path(args.pred)
    write_run_artifacts(out, "metrics", config, [Path(args.pred) / "maps"], [str(args.out or RunLayout(Path(args.pred)).metrics_report)])
    return EXIT_OK


def _float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(item) for item in text.split(",")]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got '{text}'") from None


def _check_eval_brdf(args: argparse.Namespace, cos_values: list[float]) -> None:
    if not 0.0 <= args.tau <= 1.0:
        raise ConfigError(f"--tau must lie in [0, 1], got {args.tau}")
    bad = [c for c in cos_values if not 0.0 < c <= 1.0]
    if bad:
        raise ConfigError(f"--cos values must lie in (0, 1], got {bad[0]}")
    if args.profile:
        if not 0.0 <= args.rho <= 1.0:
            raise ConfigError(f"--rho must lie in [0, 1], got {args.rho}")
        if not 0.0 < args.cos_edge <= 1.0:
            raise ConfigError(f"--cos-edge must lie in (0, 1], got {args.cos_edge}")


def cmd_eval_brdf(args: argparse.Namespace, config: RunConfig) -> int:
    f0 = config.shading.f0
    cos_values = _float_list(args.cos, "--cos")
    _check_eval_brdf(args, cos_values)
    rows = fs_table(args.tau, cos_values, f0)
    for cos_theta, value in rows:
        print(f"cos={cos_theta:.4f} fs={value:.6g}")
    payload: dict[str, Any] = {"tau": args.tau, "f0": f0, "fs": [[c, v] for c, v in rows]}
    if args.tau > 0:
        norm = ggx_normalization(args.tau, seed=config.seed)
        print(f"ggx_normalization={norm:.6f}")
        payload["ggx_normalization"] = norm
    if args.profile:
        distances = _float_list(args.distances, "--distances")
        if any(d <= 0 for d in distances):
            raise ConfigError("--distances must all be > 0")
        grid = specularity_profile(args.rho, args.tau, cos_values, distances, f0, config.shading.emitted_power)
        ratio = specularity_ratio(args.rho, args.tau, args.cos_edge, f0)
        lambertian = 1.0 / args.cos_edge
        print(f"specularity_ratio={ratio:.6g} lambertian_ratio={lambertian:.6g} rho={args.rho} tau={args.tau}")
        payload["profile"] = {"distances": distances, "intensity": grid.tolist(), "ratio": report_value(ratio)}
    if args.out:
        out = Path(args.out)
        atomic_rewrite_json(out / "brdf.json", payload)
        write_run_artifacts(out, "eval-brdf", config, [], [str(out / "brdf.json")])
    return EXIT_OK


def cmd_debug_visibility(args: argparse.Namespace, config: RunConfig) -> int:
    scene = _load_scene_checked(args.scene)
    rig = _load_rig(args.data)
    layout = RunLayout(Path(args.out))
    layout.maps_dir.mkdir(parents=True, exist_ok=True)
    frames = [args.frame] if args.frame is not None else list(range(len(rig)))
    outputs = []
    for idx in frames:
        if not 0 <= idx < len(rig):
            raise DataError(f"frame {idx} not in rig ({len(rig)} frames)")
        gaussians = instantiate(scene, rig.timestamps[idx])
        with torch.no_grad():
            blend = blend_weights(gaussians, rig, idx, config)
            sun = blend.composite(gaussians.sun_visibility).numpy()
            dirs = hemisphere_directions(gaussians.normals, config.render.samples_train)
            sky = trace_sky_visibility(gaussians, dirs, config).mean(dim=-1) if len(gaussians) else torch.zeros(0, dtype=DTYPE)
            sky_map = blend.composite(sky).numpy()
        for kind, image in (("vsun", sun), ("skyvis", sky_map)):
            path = layout.maps_dir / f"frame_{idx}_{kind}.png"
            write_preview(path, image, gamma=1.0)
            outputs.append(str(path))
        print(f"frame={idx} vsun_mean={float(np.mean(sun)):.4f} skyvis_mean={float(np.mean(sky_map)):.4f}")
    write_run_artifacts(layout.root, "debug-visibility", config, [Path(args.scene)], outputs)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "invert": cmd_invert,
    "render": cmd_render,
    "simulate-lidar": cmd_simulate_lidar,
    "synth": cmd_synth,
    "relight": cmd_relight,
    "night": cmd_night,
    "metrics": cmd_metrics,
    "eval-brdf": cmd_eval_brdf,
    "debug-visibility": cmd_debug_visibility,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invrl",
        description="Joint RGB + LiDAR inverse rendering over relightable Gaussian scene graphs",
        epilog="Any other --section.field VALUE pair overrides that config value.",
    )
    parser.add_argument("--config", type=str, help="JSON config file (defaults to config/default.json)")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value, e.g. --set schedule.max_iterations=3000",
    )
    parser.add_argument(
        "--verbose",
        action="store_true",
        help="Debug logging and full tracebacks on failure.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="Two-stage inverse rendering of a dataset")
    p.add_argument("--data", type=str)
    p.add_argument("--out", type=str)
    p.add_argument("--resume", type=str, help="Checkpoint path, or 'auto' for the latest in --out")
    p.add_argument("--init-scene", type=str, help="Start from a scene file instead of the point cloud")
    p.add_argument("--render-final", action="store_true", help="Render every frame of the final scene")
    p.add_argument("--no-progress", action="store_true")

    p = sub.add_parser("render", help="Render a scene with a dataset's rig")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True, help="Dataset directory holding rig.json and poses.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="final")
    p.add_argument("--color-path", choices=("pbr", "radiance"), default="pbr")

    p = sub.add_parser("simulate-lidar", help="Trace LiDAR returns and intensity maps")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic dataset")
    p.add_argument("--template", required=True, choices=sorted(TEMPLATES))
    p.add_argument("--out", required=True)

    p = sub.add_parser("relight", help="Replace a scene's illumination")
    p.add_argument("--scene", required=True)
    p.add_argument("--illum", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", type=str, help="Also render the relit scene with this dataset's rig")

    p = sub.add_parser("night", help="Night-time rendering with spotlights")
    p.add_argument("--scene", required=True)
    p.add_argument("--lights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("metrics", help="PSNR / SSIM / RMSE of renders against a dataset")
    p.add_argument("--pred", required=True, help="Output directory of render/invert")
    p.add_argument("--gt", required=True, help="Dataset directory")
    p.add_argument("--out", type=str, help="Report path (default PRED/metrics.json)")

    p = sub.add_parser("eval-brdf", help="Tabulate the LiDAR specular term")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--cos", type=str, default="0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--profile", action="store_true", help="Also scan intensity over angle and distance")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--distances", type=str, default="1,2,4,8")
    p.add_argument("--cos-edge", type=float, default=0.8)
    p.add_argument("--out", type=str)

    p = sub.add_parser("debug-visibility", help="Blended v_sun and sky visibility as grayscale PNGs")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame", type=int)
    return parser


def parse_overrides(pairs: list[str], extra: list[str]) -> dict[str, str]:
    """KEY=VALUE items from --set plus free --section.field VALUE tokens."""
    overrides: dict[str, str] = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"Unexpected argument '{token}'")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"Missing value for '{token}'")
        overrides[key] = value
    return overrides


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _error_prefix(error: InvrlError) -> str:
    for cls, prefix in ERROR_PREFIX.items():
        if isinstance(error, cls):
            return prefix
    return "Error"


def run(argv: list[str] | None = None) -> int:
    """Parse argv, run one command and return its exit status."""
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logging(args.verbose)
    try:
        overrides = parse_overrides(args.set, extra)
        config_path = args.config
        if config_path is None and DEFAULT_CONFIG_PATH.exists():
            config_path = str(DEFAULT_CONFIG_PATH)
        config = load_config(config_path, overrides)
        configure_torch()
        return COMMANDS[args.command](args, config)
    except InvrlError as error:
        print(f"{_error_prefix(error)}: {error}", file=sys.stderr)
        _print_debug_exception(args.command, args.verbose)
        return error.exit_code
    except ValueError as error:
        print(f"Configuration error: {error}", file=sys.stderr)
        _print_debug_exception(args.command, args.verbose)
        return EXIT_CONFIG


def main() -> None:
    """Entry point with CLI argument parsing."""
    sys.exit(run())


def _print_debug_exception(command: str, verbose: bool) -> None:
    """Print traceback details only when verbose debugging is enabled."""
    if not verbose:
        return
    print(f"\n[DEBUG] command={command}", file=sys.stderr)
    traceback.print_exc()


if __name__ == "__main__":
    main()
