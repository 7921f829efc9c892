import argparse
import dataclasses
import errno
import logging
import os
import sys
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__, export
from .classify import TrainConfig, evaluate, load_model, write_metrics
from .csi import (
    LabeledFrame,
    amplitude,
    default_subcarrier_index,
    iter_channel_blocks,
    load_dataset,
    load_frame,
    phase,
    phase_quality,
    read_geometry,
    sanitize_phase,
    save_dataset,
)
from .errors import CorruptionError, CsiHdfmError, UsageError, ValidationError
from .features import stft, write_spectrogram_csv, write_spectrogram_pgm
from .hdfm import HdfmConfig, fit_factor_count, pca_compress, write_result
from .pipeline import PipelineConfig, read_features_table, run_pipeline, write_pipeline
from .spectral import (
    MpParams,
    bbp_threshold,
    distance_to_mp,
    esd_table,
    sample_spectrum,
    spiked_limit,
    write_mp_reference_csv,
)
from .synth import (
    SpikedModelSpec,
    dataset_spec,
    derive_seed,
    gen_labeled_dataset,
    gen_noise,
    gen_spiked,
    seed_value,
    to_csi_frame,
)
from .types import CLASSIFIER_KINDS, METRICS, REFERENCES, PhaseMethod, RealMatrix, RealVector

logger = logging.getLogger(__name__)

PROG = "csi-hdfm"
DEFAULT_OUT = "csif-out"
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    inputs: dict[str, str]
    seeds: dict[str, int]
    version: str
    outputs: list[str]
    duration_s: float


@dataclass
class Run:
    """What a command read, derived and wrote, gathered for its manifest."""

    command: str
    out: Path
    config: dict[str, Any] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    outputs: list[Path] = field(default_factory=list)

    def input(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(errno.ENOENT, "No such file or directory", str(path))
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for f in files:
            self.inputs[str(f)] = export.sha256_file(f)
        return path

    def wrote(self, *paths: Path) -> None:
        self.outputs.extend(paths)

    def manifest(self, duration_s: float) -> RunManifest:
        return RunManifest(
            command=self.command,
            config=self.config,
            inputs=self.inputs,
            seeds=self.seeds,
            version=__version__,
            outputs=sorted({p.relative_to(self.out).as_posix() for p in self.outputs}),
            duration_s=duration_s,
        )


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _geometry(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        n_tx, n_rx, n_sc = (int(v) for v in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TXxRXxSC, e.g. 1x3x30, got {text!r}") from None
    return n_tx, n_rx, n_sc


def _center(matrix: RealMatrix) -> RealMatrix:
    return matrix - matrix.mean(axis=1, keepdims=True)


def _load_matrix(
    run: Run,
    path: Path,
    channel: str = "amplitude",
    center: bool = False,
    method: PhaseMethod = "least_squares",
) -> tuple[RealMatrix, float]:
    """An input matrix and its sample rate; CSV inputs are taken as already real.

    CSIF phase is reduced to the rows sanitization leaves free.
    """
    run.input(path)
    if path.suffix.lower() == ".csv":
        matrix, rate = export.read_matrix(path), 1000.0
    else:
        rate = read_geometry(path)[4]
        blocks = iter_channel_blocks(path, channel, method, reduced=True)
        matrix = np.vstack([block for _, block in blocks])
    return (_center(matrix) if center else matrix), rate


def _load_row(
    run: Run, path: Path, row: int, channel: str = "amplitude", method: PhaseMethod = "least_squares"
) -> tuple[RealVector, float]:
    run.input(path)
    if path.suffix.lower() == ".csv":
        matrix = export.read_matrix(path)
        _check_row(row, matrix.shape[0])
        return matrix[row], 1000.0
    n_tx, n_rx, n_sc, _, rate = read_geometry(path)
    _check_row(row, n_tx * n_rx * n_sc)
    for start, block in iter_channel_blocks(path, channel, method):
        if row < start + block.shape[0]:
            return block[row - start], rate
    raise CorruptionError(f"{path}: row {row} missing")


def _check_row(row: int, rows: int) -> None:
    if not 0 <= row < rows:
        raise ValidationError(f"--row {row} out of range; input has rows 0..{rows - 1}")


def _hdfm_config(args: argparse.Namespace, seed: int) -> HdfmConfig:
    return HdfmConfig(
        p_max=args.p_max,
        metric=args.metric,
        reference=args.reference,
        mc_trials=args.mc_trials,
        seed=seed,
        sigma2=args.sigma2,
        tie_tolerance=args.tie_tolerance,
        early_stop_tolerance=args.early_stop,
        threads=args.threads,
    )


def cmd_synth(args: argparse.Namespace, run: Run) -> None:
    for flag, value in (("--classes", args.classes), ("--frames", args.frames)):
        if value < 1:
            raise UsageError(f"{flag} must be >= 1, got {value}")
    n_tx, n_rx, n_sc = args.geometry or (1, 1, args.n or 30)
    n = n_tx * n_rx * n_sc
    if args.n is not None and args.n != n:
        raise UsageError(f"--n {args.n} does not match --geometry {n_tx}x{n_rx}x{n_sc} ({n} rows)")
    strengths = args.strengths
    if any(s <= 0 for s in strengths) or any(a <= b for a, b in zip(strengths, strengths[1:])):
        raise UsageError(f"--strengths must be positive and strictly descending, got {strengths}")
    try:
        spec = dataset_spec(
            n,
            args.t,
            strengths,
            args.classes,
            args.frames,
            sigma2=args.sigma2,
            seed=args.seed,
            class_spread=args.class_spread,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    frames = gen_labeled_dataset(spec, threads=args.threads)
    labeled = []
    truth_frames = []
    for item in frames:
        frame, offset = to_csi_frame(item.r, n_tx, n_rx, n_sc, args.rate)
        labeled.append(LabeledFrame(frame, item.label, item.sample_id))
        truth_frames.append(
            {
                "label": item.label,
                "sample_id": item.sample_id,
                "seed": item.seed,
                "offset": offset,
                "p": item.loadings.shape[1],
            }
        )
        run.seeds[f"{item.label}/{item.sample_id}"] = item.seed
    run.seeds["master"] = args.seed
    run.wrote(*save_dataset(run.out / "data", labeled))
    run.wrote(
        export.write_json(
            run.out / "truth.json",
            {
                "n": n,
                "t": args.t,
                "geometry": [n_tx, n_rx, n_sc],
                "sigma2": args.sigma2,
                "classes": [
                    {"label": label, "p": template.p, "strengths": template.strengths}
                    for label, template in spec.classes
                ],
                "frames": truth_frames,
            },
        )
    )


def cmd_clean(args: argparse.Namespace, run: Run) -> None:
    frame = load_frame(run.input(args.input))
    amp = amplitude(frame)
    cleaned = sanitize_phase(phase(frame), default_subcarrier_index(frame.n_sc), args.method)
    run.wrote(
        export.write_matrix(run.out / "amplitude.csv", amp),
        export.write_matrix(run.out / "phase.csv", cleaned),
        export.write_json(run.out / "phase_quality.json", phase_quality(frame).as_dict()),
    )


def cmd_hdfm(args: argparse.Namespace, run: Run) -> None:
    matrix, _ = _load_matrix(run, args.input, args.channel, args.center, args.method)
    run.seeds["monte_carlo"] = args.seed
    result = fit_factor_count(matrix, _hdfm_config(args, args.seed))
    run.wrote(*write_result(result, run.out))


def cmd_pca(args: argparse.Namespace, run: Run) -> None:
    matrix, _ = _load_matrix(run, args.input, args.channel, args.center, args.method)
    run.wrote(export.write_matrix(run.out / "features.csv", pca_compress(matrix, args.p)))


def cmd_stft(args: argparse.Namespace, run: Run) -> None:
    signal, rate = _load_row(run, args.input, args.row, args.channel, args.method)
    spectrogram = stft(
        signal,
        window_len=args.window_len,
        hop_len=args.hop_len,
        nfft=args.nfft,
        sample_rate_hz=args.rate or rate,
        window=args.window,
        detrend=args.detrend,
    )
    csv_path = run.out / "spectrogram.csv"
    pgm_path = run.out / "spectrogram.pgm"
    write_spectrogram_csv(csv_path, spectrogram)
    write_spectrogram_pgm(pgm_path, spectrogram)
    run.wrote(
        csv_path,
        pgm_path,
        export.write_table(
            run.out / "spectrogram_axes.csv",
            {"frequency_hz": spectrogram.frequencies},
        ),
        export.write_table(run.out / "spectrogram_times.csv", {"time_s": spectrogram.times}),
    )


def cmd_mp_check(args: argparse.Namespace, run: Run) -> None:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    if args.n > args.t:
        raise UsageError(f"--n {args.n} must be <= --t {args.t}")
    spikes = sorted(args.spike or [], reverse=True)
    if len(set(spikes)) != len(spikes) or any(s <= 0 for s in spikes):
        raise UsageError(f"--spike values must be positive and distinct, got {args.spike}")
    params = MpParams(args.sigma2, args.n / args.t)

    trials = []
    pooled = []
    spike_rows: dict[str, list[Any]] = {
        "trial": [], "index": [], "strength": [], "observed": [], "predicted": [], "ratio": []
    }
    for trial in range(args.trials):
        seed = seed_value(derive_seed(args.seed, trial))
        run.seeds[f"trial{trial}"] = seed
        if spikes:
            r, _, _ = gen_spiked(SpikedModelSpec(args.n, args.t, tuple(spikes), args.sigma2, seed))
        else:
            r = gen_noise(args.n, args.t, args.sigma2, seed)
        values = sample_spectrum(r).values
        pooled.append(values)
        trials.append(
            {
                "trial": trial,
                "seed": seed,
                "ks": distance_to_mp(values, params, "kolmogorov_smirnov"),
                "wasserstein1": distance_to_mp(values, params, "wasserstein1"),
                "top_eigenvalue": float(values[0]),
            }
        )
        for i, strength in enumerate(spikes):
            predicted = spiked_limit(strength, params)
            spike_rows["trial"].append(trial)
            spike_rows["index"].append(i)
            spike_rows["strength"].append(strength)
            spike_rows["observed"].append(float(values[i]))
            spike_rows["predicted"].append(predicted)
            spike_rows["ratio"].append(float(values[i]) / predicted)

    a, b = params.edges
    summary: dict[str, Any] = {
        "n": args.n,
        "t": args.t,
        "c": params.c,
        "sigma2": args.sigma2,
        "edges": [a, b],
        "bbp_threshold": bbp_threshold(params),
        "trials": trials,
        "max_ks": max(t["ks"] for t in trials),
        "max_wasserstein1": max(t["wasserstein1"] for t in trials),
    }
    if spikes:
        ratios = np.array(spike_rows["ratio"]).reshape(args.trials, len(spikes))
        observed = np.array(spike_rows["observed"]).reshape(args.trials, len(spikes))
        summary["spikes"] = [
            {
                "strength": strength,
                "supercritical": strength > bbp_threshold(params),
                "predicted": spiked_limit(strength, params),
                "mean_observed": float(observed[:, i].mean()),
                "mean_ratio": float(ratios[:, i].mean()),
            }
            for i, strength in enumerate(spikes)
        ]
        run.wrote(export.write_table(run.out / "spikes.csv", spike_rows))

    reference_path = run.out / "mp_reference.csv"
    write_mp_reference_csv(reference_path, params)
    run.wrote(
        export.write_table(run.out / "esd_vs_mp.csv", esd_table(np.concatenate(pooled), params)),
        export.write_json(run.out / "mp_check.json", summary),
        reference_path,
    )
    logger.info("Worst KS distance to the MP law: %.4g", summary["max_ks"])


def cmd_pipeline(args: argparse.Namespace, run: Run) -> None:
    if args.baseline == "pca" and args.p is None:
        raise UsageError("--baseline pca needs --p")
    frames = load_dataset(run.input(args.input))
    if not frames:
        raise UsageError(f"No CSIF frames found under {args.input}")
    stages = dict(zip(("monte_carlo", "split", "train"), np.random.SeedSequence(args.seed).spawn(3)))
    run.seeds.update({name: seed_value(s) for name, s in stages.items()})
    run.seeds["master"] = args.seed
    config = PipelineConfig(
        hdfm=_hdfm_config(args, run.seeds["monte_carlo"]),
        baseline=args.baseline,
        p=args.p,
        classifier=args.classifier,
        train=TrainConfig(
            learning_rate=args.learning_rate,
            epochs=args.epochs,
            l2=args.l2,
            seed=run.seeds["train"],
        ),
        test_fraction=args.test_fraction,
        center=args.center,
        phase_method=args.method,
        seed=run.seeds["split"],
    )
    result = run_pipeline(frames, config)
    run.config["resolved"] = dataclasses.asdict(config)
    run.wrote(*write_pipeline(result, run.out))
    run.wrote(
        export.write_json(
            run.out / "selection.json",
            {"baseline": config.baseline, "p": result.p, "accuracy": result.report.accuracy},
        )
    )


def cmd_eval(args: argparse.Namespace, run: Run) -> None:
    model = load_model(run.input(args.model))
    features, labels = read_features_table(run.input(args.input))
    report, cm = evaluate(model, features, labels)
    run.wrote(*write_metrics(report, cm, run.out))


def _add_hdfm_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--p-max", type=int, default=20)
    parser.add_argument("--metric", choices=METRICS, default="wasserstein1")
    parser.add_argument("--reference", choices=REFERENCES, default="analytic_mp")
    parser.add_argument("--mc-trials", type=int, default=10)
    parser.add_argument("--sigma2", type=float, default=None, help="fix sigma^2 instead of fitting it")
    parser.add_argument("--tie-tolerance", type=float, default=1.0)
    parser.add_argument("--early-stop", type=float, default=None, metavar="TOLERANCE")


def _add_channel_flags(parser: argparse.ArgumentParser, center: bool = True) -> None:
    parser.add_argument("--channel", choices=("amplitude", "phase"), default="amplitude")
    parser.add_argument("--center", action=argparse.BooleanOptionalAction, default=center)
    parser.add_argument("--method", choices=("two_point", "least_squares"), default="least_squares")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=None, help=f"output directory (default $CSIF_OUT or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog=PROG, description="HDFM analysis of CSI sensing matrices")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func: Callable[[argparse.Namespace, Run], None], summary: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=summary)
        sub.set_defaults(func=func)
        return sub

    sub = command("synth", cmd_synth, "write a seeded synthetic CSIF dataset")
    sub.add_argument("--classes", type=int, default=2)
    sub.add_argument("--frames", type=int, default=10, help="frames per class")
    sub.add_argument("--n", type=int, default=None, help="rows (defaults to the geometry product)")
    sub.add_argument("--t", type=int, default=1000)
    sub.add_argument("--strengths", type=_floats, default=[20.0, 6.0, 3.0])
    sub.add_argument("--sigma2", type=float, default=1.0)
    sub.add_argument("--class-spread", type=float, default=0.25)
    sub.add_argument("--geometry", type=_geometry, default=None, metavar="TXxRXxSC")
    sub.add_argument("--rate", type=float, default=1000.0)

    sub = command("clean", cmd_clean, "amplitude and sanitized phase of one frame")
    sub.add_argument("input", type=Path)
    sub.add_argument("--method", choices=("two_point", "least_squares"), default="two_point")

    sub = command("hdfm", cmd_hdfm, "select the factor count of one matrix")
    sub.add_argument("input", type=Path)
    _add_channel_flags(sub)
    _add_hdfm_flags(sub)

    sub = command("pca", cmd_pca, "fixed-p principal component features")
    sub.add_argument("input", type=Path)
    sub.add_argument("--p", type=int, required=True)
    _add_channel_flags(sub)

    sub = command("stft", cmd_stft, "spectrogram of one subcarrier row")
    sub.add_argument("input", type=Path)
    sub.add_argument("--row", type=int, default=0)
    sub.add_argument("--channel", choices=("amplitude", "phase"), default="amplitude")
    sub.add_argument("--method", choices=("two_point", "least_squares"), default="least_squares")
    sub.add_argument("--window-len", type=int, default=256)
    sub.add_argument("--hop-len", type=int, default=64)
    sub.add_argument("--nfft", type=int, default=256)
    sub.add_argument("--window", default="hann")
    sub.add_argument("--detrend", action=argparse.BooleanOptionalAction, default=True)
    sub.add_argument("--rate", type=float, default=None, help="sample rate (defaults to the frame's)")

    sub = command("pipeline", cmd_pipeline, "end-to-end classification over a dataset directory")
    sub.add_argument("input", type=Path)
    sub.add_argument("--baseline", choices=("hdfm", "pca"), default="hdfm")
    sub.add_argument("--p", type=int, default=None)
    sub.add_argument("--classifier", choices=CLASSIFIER_KINDS, default="multinomial_logistic")
    sub.add_argument("--test-fraction", type=float, default=0.2)
    sub.add_argument("--learning-rate", type=float, default=0.1)
    sub.add_argument("--epochs", type=int, default=500)
    sub.add_argument("--l2", type=float, default=1e-4)
    sub.add_argument("--method", choices=("two_point", "least_squares"), default="least_squares")
    sub.add_argument("--center", action=argparse.BooleanOptionalAction, default=True)
    _add_hdfm_flags(sub)

    sub = command("mp-check", cmd_mp_check, "compare simulated spectra with the MP law")
    sub.add_argument("--n", type=int, default=200)
    sub.add_argument("--t", type=int, default=2000)
    sub.add_argument("--sigma2", type=float, default=1.0)
    sub.add_argument("--spike", type=float, action="append", default=None)
    sub.add_argument("--trials", type=int, default=5)

    sub = command("eval", cmd_eval, "score a saved model on a features table")
    sub.add_argument("input", type=Path, help="features CSV with a label column")
    sub.add_argument("--model", type=Path, required=True)

    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    # basicConfig is a no-op once the root logger has handlers
    logging.getLogger().setLevel(level)


def _config_echo(args: argparse.Namespace) -> dict[str, Any]:
    skip = {"func", "verbose", "quiet", "out"}
    return {
        key: str(value) if isinstance(value, Path) else value
        for key, value in sorted(vars(args).items())
        if key not in skip
    }


def _fail(message: str, code: int) -> int:
    print(f"{PROG}: error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    out = args.out or Path(os.environ.get("CSIF_OUT", DEFAULT_OUT))
    run = Run(args.command, out, config=_config_echo(args))
    started = time.monotonic()
    try:
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        args.func(args, run)
    except UsageError as exc:
        return _fail(str(exc), 2)
    except FileNotFoundError as exc:
        return _fail(f"{exc.filename or exc}: not found", 2)
    except (CsiHdfmError, ValueError, TypeError, OSError) as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        return _fail(str(exc), 1)

    duration = time.monotonic() - started
    export.write_json(out / "manifest.json", run.manifest(duration))
    logger.info("%s finished in %.2fs; %d files in %s", args.command, duration, len(run.outputs), out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
