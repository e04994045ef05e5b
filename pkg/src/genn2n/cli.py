"""Command-line pipeline: make-scene -> translate -> pretrain -> train -> sample / interpolate / eval.

Every command works inside one run directory (``--out``).  Settings come
from an INI file (``--config``, one section per command) overridden by
``--set key=value``; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from pathlib import Path

EXIT_MISSING_INPUT = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4

COMMANDS = ("make-scene", "translate", "pretrain", "train", "sample", "interpolate", "eval")


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# defaults per command; the value's type drives parsing
DEFAULTS: dict[str, dict] = {
    "make-scene": {"n_views": 16, "radius": 4.0, "elevation": 30.0, "focal": 80.0,
                   "width": 64, "height": 64, "steps": 256, "scene": ""},
    "translate": {"task": "colorize", "mode_count": 2, "epsilon": 0.1, "M": 3, "scale": 4},
    "pretrain": {"iters": 2000, "rays_per_step": 1024, "samples_per_ray": 32, "lr": 5e-3},
    "train": None,  # filled from TrainConfig
    "sample": {"n_samples": 4, "views": "0,4,8,12", "samples_per_ray": 32},
    "interpolate": {"n_steps": 11, "view": 0, "samples_per_ray": 32, "z1": "", "z2": ""},
    "eval": {"a": "", "b": "", "views": "", "samples_per_ray": 32},
}


def _train_defaults() -> dict:
    import dataclasses

    from .trainer import TrainConfig
    return {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)
            if f.name != "seed"}


def _coerce(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        return type(default)(value.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def resolve_config(command: str, config_path: str | None, overrides: list[str]) -> dict:
    defaults = dict(DEFAULTS[command] if DEFAULTS[command] is not None else _train_defaults())
    resolved = dict(defaults)
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise MissingInput(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"unparseable config: {e}".replace("\n", " ")) from None
        for section in parser.sections():
            if section not in COMMANDS:
                raise ConfigError(f"unknown config section [{section}]")
            known = DEFAULTS[section] if DEFAULTS[section] is not None else _train_defaults()
            for key in parser[section]:
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
            if section == command:
                raw.update(parser[section])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if section != command:
                raise ConfigError(f"override {section}.{key} does not apply to {command}")
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} for {command}")
        raw[key] = value
    for key, value in raw.items():
        resolved[key] = _coerce(key, value, defaults[key])
    return resolved


def _int_list(text: str, key: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers") from None


def _float_list(text: str, key: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of numbers") from None


def write_run_manifest(out: Path, command: str, seed: int, cfg: dict) -> Path:
    """Written before any heavy work; the timestamp is the only non-reproducible line."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.manifest.txt"
    lines = [f"# created {time.strftime('%Y-%m-%dT%H:%M:%S')}", f"command={command}", f"seed={seed}"]
    lines += [f"{k}={cfg[k]!r}" for k in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


# -- scene artifacts --------------------------------------------------------------------

def save_cameras(poses, t_near: float, t_far: float, path: Path) -> None:
    lines = [f"bounds={t_near!r},{t_far!r}"]
    for p in poses:
        vals = [*p.position, *p.look_at, *p.up, p.focal, p.width, p.height]
        lines.append("pose=" + ",".join(repr(float(v)) for v in vals))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cameras(path: Path):
    from .scene import CameraPose
    poses, bounds = [], None
    for line in _need(path, "camera file").read_text(encoding="utf-8").splitlines():
        key, _, val = line.partition("=")
        if key == "bounds":
            bounds = tuple(float(v) for v in val.split(","))
        elif key == "pose":
            v = [float(x) for x in val.split(",")]
            poses.append(CameraPose(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), v[9], int(v[10]), int(v[11])))
    if bounds is None or not poses:
        raise ConfigError(f"malformed camera file {path}")
    return poses, bounds


def _load_scene_bundle(out: Path):
    from .scene import load_scene
    scene = load_scene(_need(out / "scene.txt", "scene"))
    poses, bounds = load_cameras(out / "cameras.txt")
    return scene, poses, bounds


# -- commands -----------------------------------------------------------------------------

def cmd_make_scene(out: Path, cfg: dict, seed: int) -> None:
    from .imageio import image_grid, write_png, write_ppm
    from .scene import default_scene, load_scene, make_camera_ring, ray_bounds, render_views, save_scene
    scene = load_scene(_need(Path(cfg["scene"]), "scene file")) if cfg["scene"] else default_scene()
    poses = make_camera_ring(cfg["n_views"], cfg["radius"], scene, cfg["elevation"], cfg["focal"],
                             cfg["width"], cfg["height"])
    t_near, t_far = ray_bounds(poses[0], scene)
    images = render_views(scene, poses, cfg["steps"])
    save_scene(scene, out / "scene.txt")
    save_cameras(poses, t_near, t_far, out / "cameras.txt")
    (out / "views").mkdir(exist_ok=True)
    for i, im in enumerate(images):
        write_ppm(out / "views" / f"view_{i:03}.ppm", im)
    write_png(out / "views.png", image_grid(images, 8))


def _load_views(out: Path, n: int):
    import numpy as np

    from .imageio import read_ppm
    return np.stack([read_ppm(_need(out / "views" / f"view_{i:03}.ppm", "source view")) for i in range(n)])


def cmd_translate(out: Path, cfg: dict, seed: int) -> None:
    from .imageio import image_grid, write_png
    from .translator import TranslatorSpec, save_edited_set, translate
    scene, poses, _ = _load_scene_bundle(out)
    sources = _load_views(out, len(poses))
    try:
        spec = TranslatorSpec(cfg["task"], cfg["mode_count"], cfg["epsilon"], scale=cfg["scale"],
                              background=scene.background)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    es = translate(spec, sources, cfg["M"], seed)
    save_edited_set(es, out / "translate")
    write_png(out / "translate" / "edits.png",
              image_grid([es.edits[i, j] for i in range(min(4, es.n_views)) for j in range(es.n_edits)],
                         es.n_edits))


def cmd_pretrain(out: Path, cfg: dict, seed: int) -> None:
    from .field import PretrainConfig, pretrain_original_nerf, save_field
    scene, poses, bounds = _load_scene_bundle(out)
    images = _load_views(out, len(poses))
    pc = PretrainConfig(cfg["iters"], cfg["rays_per_step"], cfg["samples_per_ray"], cfg["lr"], seed)
    lo, hi = (tuple(b) for b in scene.bounds)
    center = tuple((a + b) / 2 for a, b in zip(lo, hi))
    scale = max((b - a) / 2 for a, b in zip(lo, hi))
    params, train_psnr = pretrain_original_nerf(images, poses, bounds, pc, scene.background, center, scale)
    (out / "pretrain").mkdir(exist_ok=True)
    save_field(params, out / "pretrain" / "field.gn2n")
    (out / "pretrain" / "report.txt").write_text(f"train_psnr={train_psnr!r}\n", encoding="utf-8")


def _train_config(cfg: dict, seed: int):
    from .trainer import TrainConfig
    tc = TrainConfig(**cfg, seed=seed)
    try:
        tc.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return tc


def cmd_train(out: Path, cfg: dict, seed: int) -> None:
    from .field import load_field
    from .trainer import SceneSetup, train
    from .translator import load_edited_set
    scene, poses, bounds = _load_scene_bundle(out)
    original = load_field(_need(out / "pretrain" / "field.gn2n", "pretrained field"))
    edits = load_edited_set(_need(out / "translate", "edited image set"))
    tc = _train_config(cfg, seed)
    try:
        tc.validate(*edits.edits.shape[2:4])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    train(tc, original, edits, SceneSetup(poses, *bounds, scene.background), out / "train")


def _trained(out: Path):
    from .field import load_field
    return load_field(_need(out / "train" / "field.gn2n", "trained field"))


def _render_cfg(scene, n: int):
    from .field import RenderConfig
    return RenderConfig(n, stratified=False, background=scene.background)


def cmd_sample(out: Path, cfg: dict, seed: int) -> None:
    from .imageio import image_grid, write_png
    from .metrics import sample_and_render
    scene, poses, bounds = _load_scene_bundle(out)
    fld = _trained(out)
    views = _int_list(cfg["views"], "views")
    if not views or any(not 0 <= v < len(poses) for v in views):
        raise ConfigError(f"views must index 0..{len(poses) - 1}")
    samples = sample_and_render(fld, cfg["n_samples"], [poses[v] for v in views], seed, *bounds,
                                _render_cfg(scene, cfg["samples_per_ray"]))
    d = out / "samples"
    d.mkdir(exist_ok=True)
    lines = []
    for k, s in enumerate(samples):
        write_png(d / f"sample_{k:03}.png", image_grid(s.renders, len(s.renders)))
        lines.append(f"z_{k:03}=" + ",".join(repr(float(v)) for v in s.z))
    (d / "codes.txt").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def cmd_interpolate(out: Path, cfg: dict, seed: int) -> None:
    import numpy as np

    from .imageio import image_grid, write_png
    from .metrics import interpolate_codes
    scene, poses, bounds = _load_scene_bundle(out)
    fld = _trained(out)
    if not 0 <= cfg["view"] < len(poses):
        raise ConfigError(f"view must index 0..{len(poses) - 1}")
    rng = np.random.default_rng(seed)
    z1 = _float_list(cfg["z1"], "z1") or rng.standard_normal(fld.code_dim)
    z2 = _float_list(cfg["z2"], "z2") or rng.standard_normal(fld.code_dim)
    try:
        alphas, frames = interpolate_codes(fld, z1, z2, cfg["n_steps"], poses[cfg["view"]], *bounds,
                                           _render_cfg(scene, cfg["samples_per_ray"]))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    d = out / "interpolate"
    d.mkdir(exist_ok=True)
    for k, im in enumerate(frames):
        write_png(d / f"frame_{k:03}.png", im)
    write_png(d / "strip.png", image_grid(frames, len(frames)))
    (d / "alphas.txt").write_text("".join(f"{float(a)!r}\n" for a in alphas), encoding="utf-8")


def _read_dir(path: Path):
    import numpy as np

    from .imageio import read_image
    files = sorted(p for p in _need(path, "image directory").iterdir() if p.suffix.lower() in (".ppm", ".png"))
    if not files:
        raise MissingInput(f"no .ppm/.png images in {path}")
    return np.stack([read_image(p) for p in files])


def cmd_eval(out: Path, cfg: dict, seed: int) -> None:
    """Compare image set ``a`` (reference) with ``b``.

    Without explicit dirs, ``a`` is the translator output and ``b`` are fresh
    samples rendered at the edited views.
    """
    import numpy as np

    from .metrics import (MetricReport, colorfulness, frechet_distance, psnr, sample_and_render, ssim,
                          view_consistency)
    rep = MetricReport()
    fld = None
    if cfg["a"] or cfg["b"]:
        if not (cfg["a"] and cfg["b"]):
            raise ConfigError("eval needs both a and b image directories")
        set_a, set_b = _read_dir(Path(cfg["a"])), _read_dir(Path(cfg["b"]))
    else:
        from .translator import load_edited_set
        scene, poses, bounds = _load_scene_bundle(out)
        es = load_edited_set(_need(out / "translate", "edited image set"))
        fld = _trained(out)
        views = _int_list(cfg["views"], "views") or list(range(len(poses)))
        set_a = es.edits[views].reshape(-1, *es.edits.shape[2:])
        rc = _render_cfg(scene, cfg["samples_per_ray"])
        samples = sample_and_render(fld, es.n_edits, [poses[v] for v in views], seed, *bounds, rc)
        set_b = np.stack([r for s in samples for r in s.renders])
    if set_a.shape[1:] != set_b.shape[1:]:
        raise ConfigError(f"image sizes differ: {set_a.shape[1:]} vs {set_b.shape[1:]}")
    if len(set_a) == len(set_b):
        pairs = [(psnr(a, b), ssim(a, b)) for a, b in zip(set_a, set_b)]
        rep.psnr = float(np.mean([p for p, _ in pairs]))
        rep.ssim = float(np.mean([s for _, s in pairs]))
        rep.per_sample = [{"psnr": p, "ssim": s, "cf": colorfulness(b)} for (p, s), b in zip(pairs, set_b)]
    rep.cf = float(np.mean([colorfulness(b) for b in set_b]))
    if len(set_a) >= 2 and len(set_b) >= 2:
        rep.fd_proxy = frechet_distance(set_a, set_b)
    if fld is not None:
        from .trainer import load_encoder
        enc = load_encoder(_need(out / "train" / "encoder.gn2n", "trained encoder"))
        vc = [view_consistency(fld, enc, s.z, [poses[v] for v in views], *bounds, rc)
              for s in samples] if len(views) >= 2 else []
        rep.view_consistency = float(np.mean(vc)) if vc else float("nan")
    d = out / "eval"
    d.mkdir(exist_ok=True)
    (d / "report.csv").write_text(rep.to_csv(), encoding="utf-8")
    (d / "report.txt").write_text(rep.to_text(), encoding="utf-8")
    sys.stdout.write(rep.to_text())


HANDLERS = {"make-scene": cmd_make_scene, "translate": cmd_translate, "pretrain": cmd_pretrain,
            "train": cmd_train, "sample": cmd_sample, "interpolate": cmd_interpolate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="genn2n", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="INI file with one section per command")
    ap.add_argument("--out", default="run", help="run directory (default: ./run)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, help="cap on numeric worker threads (env GENN2N_THREADS)")
    ap.add_argument("--dry-run", action="store_true", help="validate config and print the plan only")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    return ap


def _limit_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("GENN2N_THREADS")
        if env is None:
            return
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"GENN2N_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    # only effective before the BLAS library initialises
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _fail(code: int, category: str, msg: str) -> int:
    sys.stderr.write(f"error[{category}]: {' '.join(str(msg).split())}\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _limit_threads(args.threads)
        cfg = resolve_config(args.command, args.config, args.overrides)
        out = Path(args.out)
        if args.dry_run:
            if args.command == "train":
                tc = _train_config(cfg, args.seed)
                print("weights=(" + ", ".join(repr(w) for w in tc.weights) + ")")
            print(f"command={args.command}")
            print(f"out={out}")
            print(f"seed={args.seed}")
            for k in sorted(cfg):
                print(f"{k}={cfg[k]!r}")
            return 0
        write_run_manifest(out, args.command, args.seed, cfg)
        HANDLERS[args.command](out, cfg, args.seed)
    except MissingInput as e:
        return _fail(EXIT_MISSING_INPUT, "missing-input", e)
    except (ConfigError, KeyError) as e:
        return _fail(EXIT_CONFIG, "config", e)
    except Exception as e:
        from .field import DivergenceError
        from .tensor import DomainError
        from .trainer import NumericalAbort
        if isinstance(e, (NumericalAbort, DivergenceError, DomainError, FloatingPointError)):
            return _fail(EXIT_NUMERICAL, "numerical", e)
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
