"""Command-line entry point.

Every subcommand writes its outputs plus a ``manifest.json`` into
``--out-dir``.  The manifest records the resolved arguments, configuration,
input/output hashes and code version; ``replay`` re-runs a manifest and
checks that the numeric outputs come out byte-identical.

Config precedence is defaults < ``--config`` file (key = value) < flags.
Training defaults are scaled for the toy model (random init, 64-d, 4 layers,
minutes on one CPU core): learning rates between 1e-4 and 3e-3 rather than the
published 1e-4 / 1e-5 / 4e-6, and a few hundred steps per stage rather than
3000 / 100 / 1500.  ``--published-schedule`` selects the published values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST = "manifest.json"
SUBCOMMANDS = ("gen-data", "train-sft", "train-alpo", "infer", "analyze-ig", "sweep",
               "pad-exp", "grad-check", "replay")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Package version plus a hash over the package sources."""
    from importlib.metadata import PackageNotFoundError, version

    try:
        ver = version("artifact")
    except PackageNotFoundError:
        ver = "0+unknown"
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{ver}+{h.hexdigest()[:12]}"


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _load_kv(path) -> dict:
    from .sft import parse_kv

    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())


def _resolve(cls, file_values: dict, overrides: dict, base=None):
    """Build ``cls`` from defaults (or ``base``), then the config file, then
    flag overrides whose value is not None."""
    from .sft import config_from_kv

    vals = dict(asdict(base)) if base is not None else {}
    vals.update(file_values)
    vals.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_kv(cls, vals)


def _split_file_config(values: dict, prefixes) -> dict:
    """Keep ``prefix.key`` entries (prefix stripped) and bare keys."""
    out = {}
    for k, v in values.items():
        if "." in k:
            pre, key = k.split(".", 1)
            if pre in prefixes:
                out[key] = v
        else:
            out[k] = v
    return out


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


class Run:
    """Collects inputs, outputs and the resolved config for the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.extra: dict = {}
        self.started = time.time()

    def input(self, path) -> str:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs[str(p)] = sha256_file(p)
        return str(p)

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def write_manifest(self) -> dict:
        m = {
            "subcommand": self.args.command,
            "argv": self.argv,
            "seed": self.args.seed,
            "config": self.config,
            "input_hashes": self.inputs,
            "output_hashes": {n: sha256_file(self.out_dir / n) for n in self.outputs},
            "code_version": code_version(),
            "started": self.started,
            "finished": time.time(),
            **self.extra,
        }
        _write_json_atomic(self.out_dir / MANIFEST, m)
        return m


def _new_state(header, seed: int):
    from . import toyvlm

    cfg = toyvlm.ModelConfig(n_vis_tokens=header.grid_size ** 2, raw_dim=header.raw_dim, seed=seed)
    return toyvlm.ModelState.init(cfg)


def _load_ckpt(run: Run, path):
    from . import toyvlm

    state = toyvlm.load_checkpoint(run.input(path))
    run.extra.setdefault("checkpoint_hashes", {})[str(path)] = toyvlm.checkpoint_hash(path)
    return state


def _load_data(run: Run, path, limit=None):
    from . import synthdata

    samples, header = synthdata.load_dataset(run.input(path))
    if limit is not None:
        samples = samples[:limit]
    return samples, header


def _log_to(stream):
    def log(m):
        print(json.dumps({k: (round(v, 6) if isinstance(v, float) else v)
                          for k, v in asdict(m).items()}), file=stream, flush=True)
    return log


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(run: Run):
    from . import synthdata

    a = run.args
    base = synthdata.GenParams()
    over = {"grid_size": a.grid, "sigma": a.sigma, "necessity_margin": a.margin}
    params = _resolve(synthdata.GenParams, _split_file_config(_load_kv(a.config), ("gen",)),
                      over, base)
    samples, header = synthdata.generate(a.n, params, a.seed, filtered=not a.unfiltered,
                                         aux_unnecessary_fraction=a.aux_unnecessary)
    synthdata.write_dataset(samples, run.output(a.out), header)
    run.config = {"gen": asdict(params), "n": a.n, "filtered": not a.unfiltered,
                  "aux_unnecessary_fraction": a.aux_unnecessary}
    print(f"wrote {len(samples)} samples (kept fraction {header.kept_fraction:.3f})")


def cmd_train_sft(run: Run):
    from . import sft, toyvlm

    a = run.args
    samples, header = _load_data(run, a.data)
    base = sft.SftConfig.published_schedule() if a.published_schedule else sft.SftConfig()
    cfg = _resolve(sft.SftConfig, _split_file_config(_load_kv(a.config), ("sft",)),
                   {"seed": a.seed}, base)
    state = _load_ckpt(run, a.init_ckpt) if a.init_ckpt else _new_state(header, a.seed)
    stages = [s for s in _csv_ints(a.stages) if s not in (a.skip_stage or [])]
    log = _log_to(sys.stderr) if a.verbose else None
    if not a.no_pretrain and not a.init_ckpt and cfg.steps0_uniform + cfg.steps0_grid > 0:
        rows = sft.pretrain_backbone(state, header.gen_params(), cfg, log=log)
        sft.write_metrics(rows, run.output("metrics_stage0.csv"))
    out = sft.run_sft(state, samples, cfg, stages, log=log, gen_params=header.gen_params())
    for s, rows in out.items():
        sft.write_metrics(rows, run.output(f"metrics_stage{s}.csv"))
    toyvlm.save_checkpoint(state, run.output(a.out))
    run.config = {"sft": asdict(cfg), "model": asdict(state.config), "stages": stages,
                  "pretrain": not a.no_pretrain}
    run.extra["checkpoint_hashes"] = {**run.extra.get("checkpoint_hashes", {}),
                                      a.out: toyvlm.checkpoint_hash(run.out_dir / a.out)}
    print(f"trained stages {stages}; markers {state.markers}")


def cmd_train_alpo(run: Run):
    from . import alpo, toyvlm

    a = run.args
    state = _load_ckpt(run, a.ckpt)
    samples, _ = _load_data(run, a.data)
    base = alpo.AlpoConfig.published_schedule() if a.published_schedule else alpo.AlpoConfig()
    cfg = _resolve(alpo.AlpoConfig, _split_file_config(_load_kv(a.config), ("alpo",)),
                   {"seed": a.seed, "steps": a.steps}, base)
    dump = [] if a.dump_rollouts else None
    rows = alpo.train(state, samples, cfg, log=_log_to(sys.stderr) if a.verbose else None,
                      dump=dump)
    alpo.write_metrics(rows, run.output("alpo_metrics.csv"))
    if dump is not None:
        alpo.write_rollouts(dump, run.output("rollouts.jsonl"))
    toyvlm.save_checkpoint(state, run.output(a.out))
    run.config = {"alpo": asdict(cfg)}
    print(f"ran {len(rows)} ALPO steps; final mean reward {rows[-1].mean_reward:.4f}"
          if rows else "ran 0 ALPO steps")


def _infer_config(a, **extra):
    from . import inference

    # not every subcommand exposes --aux-mode
    over = {"pooling_ratio": a.pooling_ratio, "aux_mode": getattr(a, "aux_mode", None),
            "placeholder_value": a.placeholder_value, "temperature": a.temperature,
            "seed": a.seed, **extra}
    return _resolve(inference.InferenceConfig,
                    _split_file_config(_load_kv(a.config), ("infer",)), over)


def _add_infer_flags(p, with_mode=True):
    p.add_argument("--pooling-ratio", type=int)
    if with_mode:
        p.add_argument("--aux-mode", choices=["normal", "disabled", "placeholder", "raw"])
    p.add_argument("--placeholder-value", type=float)
    p.add_argument("--temperature", type=float)


def cmd_infer(run: Run):
    from . import inference

    a = run.args
    state = _load_ckpt(run, a.ckpt)
    samples, _ = _load_data(run, a.data, a.limit)
    cfg = _infer_config(a)
    res = inference.run_inference_batch(state, samples, cfg)
    inference.write_results(res, samples, run.output(a.out))
    acc = sum(inference.is_correct(r, s) for r, s in zip(res, samples)) / max(len(res), 1)
    run.config = {"infer": asdict(cfg)}
    print(f"accuracy {acc:.4f} over {len(res)} samples")


def cmd_analyze_ig(run: Run):
    import numpy as np

    from . import analysis, inference

    a = run.args
    state = _load_ckpt(run, a.ckpt)
    samples, _ = _load_data(run, a.data)
    samples = [s for s in samples if s.needs_aux][:a.n]
    cfg = _infer_config(a, aux_mode="normal", pooling_ratio=1)
    latents, skipped = inference.capture_latents(state, samples, cfg)
    if not latents:
        raise RuntimeError("no sample triggered; nothing to analyse")
    T = state.config.n_vis_tokens
    ar = [analysis.ar_baseline_latents(state, s, T, rho=a.rho, noise=a.noise, seed=a.seed)
          for s in samples]
    meta = {"seed": a.seed, "checkpoint_hash": run.extra["checkpoint_hashes"][str(a.ckpt)]}
    c1 = analysis.ig_curve(latents, a.max_pos)
    c2 = analysis.ig_curve(ar, a.max_pos)
    analysis.write_ig_curve(c1, run.output("ig_single_shot.csv"), {**meta, "path": "single-shot"})
    analysis.write_ig_curve(c2, run.output("ig_ar_baseline.csv"),
                            {**meta, "path": "ar-baseline", "rho": a.rho, "noise": a.noise})
    run.outputs += ["ig_single_shot.csv.json", "ig_ar_baseline.csv.json"]
    t = T // 2
    run.config = {"infer": asdict(cfg), "n": len(samples), "rho": a.rho, "noise": a.noise}
    print(f"median IG at t={t}: single-shot {c1.at(t):.4f}, ar-baseline {c2.at(t):.4e} "
          f"({len(latents)} sequences, {skipped} skipped); "
          f"ar non-increasing from t=3: {bool(np.all(np.diff(c2.median[2:]) <= 0))}")


def cmd_sweep(run: Run):
    from . import analysis

    a = run.args
    state = _load_ckpt(run, a.ckpt)
    samples, _ = _load_data(run, a.data, a.limit)
    samples = [s for s in samples if s.needs_aux]
    cfg = _infer_config(a, aux_mode="normal")
    lengths = _csv_ints(a.lengths) if a.lengths else [1, 3, 10, 30, state.config.n_vis_tokens]
    sw = analysis.latent_length_sweep(state, samples, lengths, cfg)
    meta = {"seed": a.seed, "checkpoint_hash": run.extra["checkpoint_hashes"][str(a.ckpt)],
            "placeholder_value": cfg.placeholder_value}
    analysis.write_sweep(sw, run.output("sweep.csv"), meta)
    run.outputs.append("sweep.csv.json")
    run.config = {"infer": asdict(cfg), "lengths": lengths}
    gap = analysis.padding_gap(sw)
    for L, n, p, g in zip(sw.latent_lengths, sw.accuracy_normal, sw.accuracy_padded, gap):
        print(f"length {L:4d}: normal {n:.4f} padded {p:.4f} gap {g:+.4f}")


def cmd_pad_exp(run: Run):
    import csv

    from . import inference

    a = run.args
    state = _load_ckpt(run, a.ckpt)
    samples, _ = _load_data(run, a.data, a.limit)
    samples = [s for s in samples if s.needs_aux]
    rows = []
    cfgs = {}
    for mode in ("normal", "disabled", "placeholder", "raw_visual"):
        cfg = _infer_config(a, aux_mode=mode)
        cfgs[mode] = asdict(cfg)
        res = inference.run_inference_batch(state, samples, cfg)
        acc = sum(inference.is_correct(r, s) for r, s in zip(res, samples)) / max(len(res), 1)
        trig = sum(r.triggered for r in res) / max(len(res), 1)
        rows.append((mode, acc, trig))
    with open(run.output("pad_exp.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "accuracy", "trigger_rate"])
        for mode, acc, trig in rows:
            w.writerow([mode, repr(float(acc)), repr(float(trig))])
    run.config = {"infer": cfgs, "n": len(samples)}
    for mode, acc, trig in rows:
        print(f"{mode:12s} accuracy {acc:.4f} trigger rate {trig:.4f}")


def cmd_grad_check(run: Run):
    import numpy as np

    from . import alpo, sft, synthdata, toyvlm
    from .numerics import SeededRng, finite_diff_check

    a = run.args
    if a.ckpt:
        state = _load_ckpt(run, a.ckpt)
    else:
        state = toyvlm.ModelState.init(toyvlm.ModelConfig(seed=a.seed))
    params = synthdata.GenParams(grid_size=int(round(state.config.n_vis_tokens ** 0.5)),
                                 raw_dim=state.config.raw_dim)
    data, _ = synthdata.generate(4, params, a.seed, filtered=False)
    cfg = sft.SftConfig(seed=a.seed)
    batch = sft.make_batch(state, data[:2])
    tf = np.array([True, False])
    acfg = alpo.AlpoConfig(seed=a.seed, group_size=2, prompts_per_step=1)
    groups = alpo.rollout_batch(state, data[:1], acfg, SeededRng(a.seed).child("gc"))
    recs = groups[0]
    for i, r in enumerate(recs):
        r.advantage = (-1.0) ** i    # nonzero signal on every record
    ref = alpo.reference_copy(state)
    checks = {
        "stage1": (("detrans",), lambda s: sft.stage1_loss(s, batch)),
        "stage2": (("embed", "llm"), lambda s: sft.stage2_loss(s, batch, cfg)),
        "stage3": (("embed", "llm", "detrans"), lambda s: sft.stage3_loss(s, batch, cfg, tf)[0]),
        "alpo": (("embed", "llm"), lambda s: alpo.alpo_loss(s, ref, recs, acfg)[0]),
    }
    results = {}
    for name, (groups_, fn) in checks.items():
        state.set_trainable(*groups_)
        err = finite_diff_check(fn, state, n_probes=a.probes,
                                rng=np.random.default_rng(a.seed))
        results[name] = err
        print(f"{name:7s} max relative error {err:.3e}")
    state.set_trainable()
    worst = max(results.values())
    with open(run.output("grad_check.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({k: repr(float(v)) for k, v in results.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.config = {"probes": a.probes}
    run.extra["passed"] = bool(worst < a.tol)
    if worst >= a.tol:
        run.extra["exit_code"] = EXIT_RUNTIME
        print(f"FAILED: worst relative error {worst:.3e} >= {a.tol:g}")


def cmd_replay(run: Run):
    a = run.args
    with open(a.manifest, encoding="utf-8") as fh:
        m = json.load(fh)
    argv = list(m["argv"])
    if "--out-dir" in argv:
        i = argv.index("--out-dir")
        argv[i + 1] = a.out_dir
    else:
        argv = ["--out-dir", a.out_dir] + argv
    code = main(argv)
    if code != EXIT_OK:
        run.extra["exit_code"] = code
        return
    fresh = json.loads((Path(a.out_dir) / MANIFEST).read_text(encoding="utf-8"))
    diff = [n for n, h in m["output_hashes"].items() if fresh["output_hashes"].get(n) != h]
    run.extra["skip_manifest"] = True
    if diff:
        print(f"replay differs in: {', '.join(diff)}")
        run.extra["exit_code"] = EXIT_RUNTIME
    else:
        print(f"replay reproduced {len(m['output_hashes'])} output file(s) byte-identically")


COMMANDS = {
    "gen-data": cmd_gen_data, "train-sft": cmd_train_sft, "train-alpo": cmd_train_alpo,
    "infer": cmd_infer, "analyze-ig": cmd_analyze_ig, "sweep": cmd_sweep,
    "pad-exp": cmd_pad_exp, "grad-check": cmd_grad_check, "replay": cmd_replay,
}


def _add_globals(p, top: bool) -> None:
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None),
                   help="key = value file; keys may carry a section prefix (sft., alpo., gen., infer.)")
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--threads", type=int, default=d(1), help="BLAS thread cap")
    p.add_argument("--out-dir", default=d("."))
    p.add_argument("-v", "--verbose", action="store_true", default=d(False),
                   help="per-step logs on stderr")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentvis", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_globals(p, top=True)
    # global flags are accepted after the subcommand as well
    common = _Parser(add_help=False)
    _add_globals(common, top=False)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    _orig = sub.add_parser
    sub.add_parser = lambda name, **kw: _orig(name, parents=[common], **kw)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--grid", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--margin", type=float)
    g.add_argument("--aux-unnecessary", type=float, default=0.0,
                   help="fraction of undegraded samples without a trigger")
    g.add_argument("--unfiltered", action="store_true")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train-sft", help="backbone pretraining plus three-stage SFT")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="model.bin")
    t.add_argument("--stages", default="1,2,3")
    t.add_argument("--skip-stage", type=int, action="append", help="ablation: drop a stage")
    t.add_argument("--init-ckpt")
    t.add_argument("--no-pretrain", action="store_true")
    t.add_argument("--published-schedule", action="store_true")

    r = sub.add_parser("train-alpo", help="policy optimisation from an SFT checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", default="model_alpo.bin")
    r.add_argument("--steps", type=int)
    r.add_argument("--dump-rollouts", action="store_true")
    r.add_argument("--published-schedule", action="store_true")

    i = sub.add_parser("infer", help="two-phase inference to JSON lines")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", default="results.jsonl")
    i.add_argument("--limit", type=int)
    _add_infer_flags(i)

    a = sub.add_parser("analyze-ig", help="information-gain curves vs a chained baseline")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--n", type=int, default=50)
    a.add_argument("--max-pos", type=int)
    a.add_argument("--rho", type=float, default=0.9)
    a.add_argument("--noise", type=float, default=0.0)
    _add_infer_flags(a, with_mode=False)

    s = sub.add_parser("sweep", help="accuracy vs latent length, normal and padded")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--lengths")
    s.add_argument("--limit", type=int)
    _add_infer_flags(s, with_mode=False)

    x = sub.add_parser("pad-exp", help="accuracy under each auxiliary ablation mode")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--limit", type=int)
    _add_infer_flags(x, with_mode=False)

    c = sub.add_parser("grad-check", help="finite-difference check of every training loss")
    c.add_argument("--ckpt")
    c.add_argument("--probes", type=int, default=64)
    c.add_argument("--tol", type=float, default=1e-4)

    y = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    y.add_argument("manifest")
    return p


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose one of " + ", ".join(SUBCOMMANDS))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    _set_threads(args.threads)
    from .errors import ConfigError

    run = Run(args, argv)
    try:
        COMMANDS[args.command](run)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:   # runtime failures map to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not run.extra.pop("skip_manifest", False):
        code = run.extra.get("exit_code", EXIT_OK)
        run.write_manifest()
        return code
    return run.extra.get("exit_code", EXIT_OK)


if __name__ == "__main__":
    sys.exit(main())
