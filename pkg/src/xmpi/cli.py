"""Command-line workflow: simulate -> preprocess -> train -> extract -> evaluate -> export.

Every stage reads its inputs from and writes its outputs to ``--out`` and
records content hashes in ``manifest.json``; a stage refuses inputs whose
hash differs from the one recorded when they were written. Progress goes to
standard error, a one-line JSON summary per stage to standard output.

Exit codes: 0 success, 1 stage failure, 2 usage error, 3 format or
validation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_STAGE, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3
STAGE_ORDER = ("simulate", "preprocess", "train", "extract", "evaluate", "export")
COMMANDS = STAGE_ORDER + ("all",)

SIM_VIEW, SIM_FLAT, SIM_DARK = "sim/view{}.frames", "sim/flat{}.frames", "sim/dark{}.frames"
PRE_VIEW, PRE_MASK = "pre/view{}.frames", "pre/mask{}.frames"
CKPT, LOG, CURVES = "train/field.ckpt", "train/log.jsonl", "train/curves.json"
VOLUME, METRICS = "extract/volume.xvol", "evaluate/metrics.json"


class UsageError(Exception):
    pass


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _ArgParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration (default: built-in defaults)")
    common.add_argument("--seed", type=int, metavar="N", help="run seed (overrides io.seed)")
    common.add_argument("--out", metavar="DIR", default="run", help="output directory (default: ./run)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics and wall-clock-free logs for byte-identical outputs")
    common.add_argument("--threads", type=int, metavar="N", help="numeric library thread count")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                        help="override a config key, e.g. --set train.epochs=10 (repeatable)")
    p = _ArgParser(prog="xmpi", description="Desk-scale MHz X-ray multi-projection imaging and 4D reconstruction.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_ArgParser)
    helps = {
        "simulate": "render frame, flat and dark stacks for every beamlet",
        "preprocess": "flat-field, denoise, register, harmonize and segment the simulated stacks",
        "train": "fit the implicit 4D field to the preprocessed views",
        "extract": "extract filtered volume grids from the trained field",
        "evaluate": "compare extracted volumes with the simulated ground truth",
        "export": "write MIP images, isosurface meshes and view montages",
        "all": "run every stage in order",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return p


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _summary(obj: dict):
    print(json.dumps(obj, sort_keys=True), flush=True)


def _set_threads(n: int | None):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# -- stages ----------------------------------------------------------------------


class Run:
    def __init__(self, cfg, out: Path, seed: int, deterministic: bool):
        from .io import RunManifest

        self.cfg, self.out, self.seed, self.deterministic = cfg, out, seed, deterministic
        out.mkdir(parents=True, exist_ok=True)
        for d in ("sim", "pre", "train", "extract", "evaluate", "export"):
            (out / d).mkdir(exist_ok=True)
        self.manifest = RunManifest.load(out) or RunManifest(cfg.to_dict())
        self.manifest.config = cfg.to_dict()
        self.manifest.seeds = {"run": seed}

    def n_views(self) -> int:
        return len(self.cfg["beamline"]["reflections"])

    def path(self, rel: str) -> Path:
        return self.out / rel

    def need(self, rels):
        self.manifest.verify_inputs(self.out, rels)

    def done(self, stage: str, inputs, outputs, **info):
        self.manifest.record(stage, self.out, inputs, outputs, **info)
        self.manifest.save(self.out)

    # stage bodies return the summary dict

    def simulate(self) -> dict:
        from .forward import simulate_acquisition
        from .io import store_framestack

        c = self.cfg
        b, d = c["beamline"], c["detector"]
        _log(f"simulate: {b['frames_per_train']} pulses, {self.n_views()} beamlets, seed {self.seed}")
        acq = simulate_acquisition(c.phantom(), c.beamline_config(), self.seed, detectors=c.detectors(),
                                   shot_params=c.shot_params(), n_flats=d["n_flats"], n_darks=d["n_darks"],
                                   camera_lead=b["camera_lead"], exposure=b["exposure"])
        outs = []
        for i in range(len(acq.stacks)):
            for tmpl, st in ((SIM_VIEW, acq.stacks[i]), (SIM_FLAT, acq.flats[i]), (SIM_DARK, acq.darks[i])):
                store_framestack(self.path(tmpl.format(i)), st)
                outs.append(tmpl.format(i))
        self.done("simulate", [], outs)
        return {"frames": [len(s) for s in acq.stacks], "flats": [len(s) for s in acq.flats],
                "darks": [len(s) for s in acq.darks], "drift_ns": acq.timing["cumulative_drift_ns"]}

    def preprocess(self) -> dict:
        import numpy as np

        from .forward import FrameStack
        from .io import load_framestack, store_framestack
        from .preprocess import preprocess_views

        n = self.n_views()
        if n != 2:
            raise ValueError(f"the preprocessing chain needs exactly two beamlets, config has {n}")
        ins = [t.format(i) for i in range(n) for t in (SIM_VIEW, SIM_FLAT, SIM_DARK)]
        self.need(ins)
        stacks = [load_framestack(self.path(SIM_VIEW.format(i))) for i in range(n)]
        flats = [load_framestack(self.path(SIM_FLAT.format(i))) for i in range(n)]
        darks = [load_framestack(self.path(SIM_DARK.format(i))) for i in range(n)]
        res = preprocess_views(stacks, flats, darks, self.cfg.preprocess_config(),
                               progress=lambda m: _log(f"preprocess: {m}"))
        outs = []
        for i, (st, m) in enumerate(zip(res.stacks, res.masks)):
            store_framestack(self.path(PRE_VIEW.format(i)), st.replace_frames(np.asarray(st.frames, np.float32)))
            mask_stack = FrameStack(m.astype(np.uint16), st.timestamps, st.shot_records, st.beamlet_id,
                                    st.pixel_pitch, {"kind": "mask"})
            store_framestack(self.path(PRE_MASK.format(i)), mask_stack)
            outs += [PRE_VIEW.format(i), PRE_MASK.format(i)]
        self.done("preprocess", ins, outs)
        return {"shape": list(res.stacks[0].frames.shape), "pixel_pitch": res.stacks[0].pixel_pitch,
                "mask_fraction": [float(np.mean(m)) for m in res.masks]}

    def _views(self):
        from .io import load_framestack

        n = self.n_views()
        ins = [t.format(i) for i in range(n) for t in (PRE_VIEW, PRE_MASK)]
        self.need(ins)
        views = [load_framestack(self.path(PRE_VIEW.format(i))) for i in range(n)]
        masks = [load_framestack(self.path(PRE_MASK.format(i))).frames.astype(bool) for i in range(n)]
        return ins, views, masks

    def train(self) -> dict:
        from .forward import FrameStack
        from .recon import save_field_checkpoint, train_reconstruction
        from .io import atomic_write
        from .io.formats import to_json

        ins, views, masks = self._views()
        k = self.cfg["train"]["max_frames"]
        if k is not None:
            views = [FrameStack(v.frames[:k], v.timestamps[:k], v.shot_records[:k], v.beamlet_id, v.pixel_pitch,
                                v.metadata) for v in views]
            masks = [m[:k] for m in masks]
        tc = self.cfg.train_config(self.seed)
        log_path = self.path(LOG)
        if log_path.exists():
            log_path.unlink()
        clock = (lambda: 0.0) if self.deterministic else None
        kw = {"clock": clock} if clock else {}
        res = train_reconstruction(views, None, tc, masks=masks, mu_scale=self.cfg.mu(), log_path=log_path,
                                   progress=lambda e, m: _log(f"train: epoch {e}/{tc.epochs} mse {m:.3e}"), **kw)
        save_field_checkpoint(self.path(CKPT), res.field, res.discriminator, tc.epochs)
        atomic_write(self.path(CURVES), to_json({"epoch_mse": res.epoch_mse}) + "\n")
        self.done("train", ins, [CKPT, LOG, CURVES], train_config=tc.to_dict())
        return {"epochs": tc.epochs, "final_mse": res.epoch_mse[-1] if res.epoch_mse else None,
                "frames": len(views[0])}

    def extract(self) -> dict:
        import numpy as np

        from .io import read_frame_header, store_volume
        from .io.formats import sidecar_path
        from .recon import extract_sequence, load_field_checkpoint

        self.need([CKPT, PRE_VIEW.format(0)])
        fld, _, _ = load_field_checkpoint(self.path(CKPT))
        read_frame_header(self.path(PRE_VIEW.format(0)))
        times = np.array(json.loads(sidecar_path(self.path(PRE_VIEW.format(0))).read_text())["timestamps"])
        t0, t1 = fld.norm.t_range
        times = times[(times >= t0 - 1e-6) & (times <= t1 + 1e-6)][::self.cfg["io"]["extract_every"]]
        io = self.cfg["io"]
        _log(f"extract: {len(times)} time points at n = {io['extract_n']}")
        vol = extract_sequence(fld, times, n=io["extract_n"], sigma=io["extract_sigma"],
                               downsample=io["extract_downsample"], tile=io["extract_tile"],
                               max_bytes=io["extract_max_bytes"])
        store_volume(self.path(VOLUME), vol)
        self.done("extract", [CKPT, PRE_VIEW.format(0)], [VOLUME])
        return {"shape": list(vol.data.shape), "voxel_pitch_um": vol.voxel_pitch}

    def evaluate(self) -> dict:
        from .io import atomic_write, load_framestack, load_volume
        from .io.formats import to_json
        from .phantom import ScalarField4D
        from .recon import evaluate_reconstruction

        self.need([VOLUME, PRE_VIEW.format(0), PRE_VIEW.format(1)])
        recon = load_volume(self.path(VOLUME))
        views = [load_framestack(self.path(PRE_VIEW.format(i))) for i in range(2)]
        truth = ScalarField4D.from_phantom(self.cfg.phantom())
        angles = self.cfg["io"]["held_out_angles"]
        if angles is None:
            angles = [sum(float(v.metadata["view_angle_deg"]) for v in views) / 2]
        rep = evaluate_reconstruction(recon, truth, views, held_out_angles=angles,
                                      held_out_shape=views[0].frames.shape[-2:],
                                      held_out_pitch=views[0].pixel_pitch)
        atomic_write(self.path(METRICS), to_json(rep.to_dict()) + "\n")
        self.done("evaluate", [VOLUME, PRE_VIEW.format(0), PRE_VIEW.format(1)], [METRICS])
        return {"mean_iou": float(rep.iou.mean()), "min_iou": float(rep.iou.min()),
                "mean_volume_error_pct": float(rep.volume_error_pct.mean())}

    def export(self) -> dict:
        from .io import export_visuals, load_framestack, load_volume

        ins = [VOLUME, PRE_VIEW.format(0), PRE_VIEW.format(1)]
        self.need(ins)
        vol = load_volume(self.path(VOLUME))
        views = [load_framestack(self.path(PRE_VIEW.format(i))) for i in range(2)]
        angles = tuple(float(v.metadata["view_angle_deg"]) for v in views)
        io = self.cfg["io"]
        outs = []
        for mode in io["export_modes"]:
            files = export_visuals(vol, self.path("export"), mode, axis=io["mip_axis"],
                                   threshold=io["iso_threshold"], measured=views, view_angles=angles)
            outs += [str(f.relative_to(self.out)) for f in files]
        self.done("export", ins, outs)
        return {"files": len(outs)}


def _run_stage(run: Run, stage: str):
    _log(f"[{stage}] start")
    info = getattr(run, stage)()
    _summary({"stage": stage, "status": "ok", **info})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
        if args.deterministic and args.threads is None:
            args.threads = 1
        _set_threads(args.threads)
    except UsageError as e:
        print(f"xmpi: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    from .autodiff.checkpoint import CheckpointFormatError
    from .io import ConfigError, DependencyError, FormatError, parse_config

    try:
        cfg = parse_config(args.config).with_overrides(args.overrides)
    except FileNotFoundError as e:
        print(f"xmpi: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"xmpi: config error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    seed = cfg["io"]["seed"] if args.seed is None else args.seed
    if seed < 0:
        print("xmpi: usage error: --seed must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    stages = STAGE_ORDER if args.command == "all" else (args.command,)
    stage = stages[0]
    try:
        run = Run(cfg, Path(args.out), seed, args.deterministic)
        for stage in stages:
            _run_stage(run, stage)
    except (FormatError, CheckpointFormatError, ConfigError) as e:
        print(f"xmpi: format error: {e}", file=sys.stderr)
        _summary({"stage": stage, "status": "error", "error": str(e)})
        return EXIT_FORMAT
    except DependencyError as e:
        print(f"xmpi: missing dependency: {e}", file=sys.stderr)
        _summary({"stage": stage, "status": "error", "error": str(e)})
        return EXIT_STAGE
    except Exception as e:  # any other stage failure
        print(f"xmpi: {stage} failed: {type(e).__name__}: {e}", file=sys.stderr)
        _summary({"stage": stage, "status": "error", "error": f"{type(e).__name__}: {e}"})
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
