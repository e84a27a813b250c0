"""Command-line experiment runner.

Usage::

    phylearn <subcommand> --config <path> [--out <dir>]

The config is flat ``key = value`` text with ``#`` comments. Every key is
validated before any work starts; the resolved config is echoed into
``manifest.txt`` so it can be fed back in to repeat the run. Exit codes:
0 success, 1 validation error, 2 runtime failure. Errors are reported on
stderr as one line: ``error kind=<validation|runtime> field=<name> msg=<text>``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from typing import Any, Callable

import numpy as np

from phylearn import __version__
from phylearn import approx, comms, inversion
from phylearn.errors import InvalidParameterError, ParseError
from phylearn.nn import (
    Activation,
    TrainConfig,
    load_network,
    save_network,
)
from phylearn.numerics import RngStream

MANIFEST_VERSION = 1
REQUIRED = object()


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(message)


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _float_pair(text: str) -> tuple[float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return parts[0], parts[1]


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


COMMON = {
    "experiment": (str, ""),
    "seed": (int, REQUIRED),
    "out": (str, ""),
    "workers": (int, 1),
}

TRAINING = {
    "optimizer": (str, "adam"),
    "learning_rate": (float, 1e-3),
    "lr_decay": (float, 1.0),
    "batch_size": (int, 128),
    "epochs": (int, 50),
}

DETECTION = {
    **TRAINING,
    "sigma2": (float, 0.2),
    "per_point": (int, 10000),
    "hidden": (_int_list, "16,16"),
    "features": (_bool, "false"),
    "network": (str, ""),
}

REGIONS = {
    "x_range": (_float_pair, "-5,5"),
    "y_range": (_float_pair, "-5,5"),
    "resolution": (int, 512),
    "square": (_float_pair, "-1.5,1.5"),
}

NONLINEARITY = {
    "nonlinearity": (str, "tanh-saturation"),
    "nl_gain": (float, None),
    "nl_clip": (float, None),
    "nl_drive": (float, None),
    "nl_smoothness": (float, None),
    "nl_saturation": (float, None),
    "nl_bits": (int, None),
    "nl_range": (float, None),
    "input_variance": (float, 1.0),
}

SCHEMAS: dict[str, dict[str, tuple[Callable, Any]]] = {
    "detect-train": {**COMMON, **DETECTION},
    "detect-eval": {
        **COMMON, **DETECTION, **REGIONS,
        "trials": (int, 1000000),
        "ser_sigma2": (_float_list, ""),
    },
    "regions": {**COMMON, **DETECTION, **REGIONS},
    "approx-waterfill": {
        **COMMON, **TRAINING,
        "epochs": (int, 200),
        "channels": (int, 4),
        "total_power": (float, 1.0),
        "gain_low": (float, 0.1),
        "gain_high": (float, 2.0),
        "samples": (int, 20000),
        "hidden": (_int_list, "64,64"),
        "tol": (float, 1e-10),
        "bench_batch": (int, 10000),
    },
    "approx-unfold": {
        **COMMON, **TRAINING,
        "learning_rate": (float, 1e-2),
        "epochs": (int, 2000),
        "layers": (int, 5),
        "snr_db": (float, 10.0),
        "samples": (int, 20000),
        "trials": (int, 1000000),
    },
    "invert": {
        **COMMON, **TRAINING, **NONLINEARITY,
        "epochs": (int, 100),
        "samples": (int, 20000),
        "hidden": (_int_list, "32,32"),
        "hidden_activation": (str, "tanh"),
        "trials": (int, 100000),
        "bussgang_samples": (int, 1000000),
        "biased": (_bool, "false"),
    },
    "bussgang": {
        **COMMON, **NONLINEARITY,
        "samples": (int, 1000000),
    },
}


def read_config(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    try:
        with open(os.fspath(path), encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(key, f"line {lineno}: duplicate key")
        raw[key] = value
    return raw


def resolve(command: str, raw: dict[str, str]) -> dict[str, Any]:
    """Apply the subcommand schema: reject unknown keys, parse values, fill defaults."""
    schema = SCHEMAS[command]
    for key in raw:
        if key not in schema:
            raise ConfigError(key, f"unknown key for {command}")
    if raw.get("experiment") and raw["experiment"] != command:
        raise ConfigError("experiment", f"config is for {raw['experiment']!r}, not {command!r}")
    cfg: dict[str, Any] = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            text = raw[key]
        elif default is REQUIRED:
            raise ConfigError(key, "missing required field")
        elif default is None:
            cfg[key] = None
            continue
        else:
            text = default if isinstance(default, str) else repr(default)
        try:
            cfg[key] = conv(text) if conv is not str else text
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {text!r}: {exc}") from None
    cfg["experiment"] = command
    _validate(command, cfg)
    return cfg


def _check(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(field, message)


def _train_config(cfg, loss: str) -> TrainConfig:
    try:
        return TrainConfig(
            optimizer=cfg["optimizer"],
            learning_rate=cfg["learning_rate"],
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            seed=cfg["seed"],
            loss=loss,
            lr_decay=cfg["lr_decay"],
        )
    except InvalidParameterError as exc:
        raise ConfigError("training", str(exc)) from None


def _nonlinearity(cfg) -> inversion.Nonlinearity:
    params = {k[3:]: v for k, v in cfg.items() if k.startswith("nl_") and v is not None}
    if cfg["nonlinearity"] == "tanh-saturation":
        params.setdefault("drive", 1.0)
    try:
        return inversion.Nonlinearity(cfg["nonlinearity"], params)
    except InvalidParameterError as exc:
        raise ConfigError("nonlinearity", str(exc)) from None


def _validate(command: str, cfg: dict[str, Any]) -> None:
    _check(cfg["workers"] >= 1, "workers", "must be >= 1")
    if "epochs" in cfg:
        loss = "cross-entropy" if command in ("detect-train", "detect-eval", "regions") else "mse"
        _train_config(cfg, loss)
    if "sigma2" in cfg:
        _check(cfg["sigma2"] >= 0 and math.isfinite(cfg["sigma2"]), "sigma2", "must be >= 0")
        _check(cfg["per_point"] >= 1, "per_point", "must be >= 1")
        _check(all(h >= 1 for h in cfg["hidden"]), "hidden", "widths must be >= 1")
        _check(cfg["batch_size"] <= 4 * cfg["per_point"], "batch_size", "exceeds training-set size")
        if cfg["network"]:
            _check(os.path.isfile(cfg["network"]), "network", f"no such file {cfg['network']!r}")
    if "resolution" in cfg:
        _check(cfg["resolution"] >= 2, "resolution", "must be >= 2")
        for key in ("x_range", "y_range", "square"):
            lo, hi = cfg[key]
            _check(lo < hi, key, "empty interval")
    if "trials" in cfg:
        _check(cfg["trials"] >= 1, "trials", "must be >= 1")
    if cfg.get("ser_sigma2"):
        _check(all(s >= 0 for s in cfg["ser_sigma2"]), "ser_sigma2", "must be >= 0")
    if command == "approx-waterfill":
        _check(cfg["channels"] >= 1, "channels", "must be >= 1")
        _check(cfg["total_power"] > 0, "total_power", "must be > 0")
        _check(0 < cfg["gain_low"] < cfg["gain_high"], "gain_low", "need 0 < gain_low < gain_high")
        _check(cfg["tol"] > 0, "tol", "must be > 0")
        _check(cfg["bench_batch"] >= 1, "bench_batch", "must be >= 1")
    if command == "approx-unfold":
        _check(cfg["layers"] >= 1, "layers", "must be >= 1")
        _check(math.isfinite(cfg["snr_db"]), "snr_db", "must be finite")
    if "samples" in cfg:
        _check(cfg["samples"] >= 2, "samples", "must be >= 2")
        if command in ("approx-waterfill", "invert"):
            train_size = cfg["samples"] - math.ceil(cfg["samples"] * 0.2)
            _check(cfg["batch_size"] <= train_size, "batch_size", "exceeds training-set size")
    if "nonlinearity" in cfg:
        _nonlinearity(cfg)
        _check(cfg["input_variance"] > 0, "input_variance", "must be > 0")
    if command == "invert":
        _check(cfg["bussgang_samples"] >= 2, "bussgang_samples", "must be >= 2")
        try:
            Activation(cfg["hidden_activation"])
        except ValueError:
            raise ConfigError("hidden_activation", "unknown activation") from None
        _check(cfg["hidden_activation"] != "softmax", "hidden_activation", "softmax is output-only")


# --------------------------------------------------------------------------
# experiments


def _detector_setup(cfg, out: str):
    c = comms.qpsk()
    tc = _train_config(cfg, "cross-entropy")
    if cfg["network"]:
        net = load_network(cfg["network"])
        history = []
    else:
        data = comms.generate_detection_dataset(
            c, cfg["sigma2"], cfg["per_point"], RngStream(cfg["seed"], 10), features=cfg["features"]
        )
        net, history = comms.train_detector(data, cfg["hidden"], tc)
    return c, net, history


def _write_loss(history, path) -> None:
    approx.write_report_csv(path, ["epoch", "loss"], [(i + 1, float(v)) for i, v in enumerate(history)])


def _regions(cfg, c, net, out: str) -> None:
    feat = c if cfg["features"] else None
    kwargs = dict(
        x_range=cfg["x_range"], y_range=cfg["y_range"],
        resolution=(cfg["resolution"], cfg["resolution"]), square=cfg["square"],
    )
    nn_grid = comms.rasterize_regions(comms.nn_detector(net, feat), reference=comms.ml_detector(c), **kwargs)
    ml_grid = comms.rasterize_regions(comms.ml_detector(c), **kwargs)
    comms.write_regions_ppm(nn_grid, os.path.join(out, "regions_nn.ppm"), marks=c)
    comms.write_regions_ppm(ml_grid, os.path.join(out, "regions_ml.ppm"), marks=c)
    comms.write_regions_csv(nn_grid, os.path.join(out, "regions_nn.csv"))
    comms.write_regions_csv(ml_grid, os.path.join(out, "regions_ml.csv"))
    lo, hi = cfg["square"]
    approx.write_report_csv(
        os.path.join(out, "agreement.csv"),
        ["region", "square_lo", "square_hi", "agreement"],
        [("inside", lo, hi, nn_grid.agreement_inside), ("outside", lo, hi, nn_grid.agreement_outside)],
    )


def run_detect_train(cfg, out):
    c, net, history = _detector_setup(cfg, out)
    save_network(net, os.path.join(out, "detector.net"))
    _write_loss(history, os.path.join(out, "loss.csv"))
    return f"trained detector, final loss {history[-1]:.4g}" if history else "loaded detector"


def run_detect_eval(cfg, out):
    c, net, history = _detector_setup(cfg, out)
    save_network(net, os.path.join(out, "detector.net"))
    if history:
        _write_loss(history, os.path.join(out, "loss.csv"))
    feat = c if cfg["features"] else None
    rows = []
    for i, s2 in enumerate(cfg["ser_sigma2"] or (cfg["sigma2"],)):
        for j, (name, det) in enumerate((("ml", comms.ml_detector(c)), ("nn", comms.nn_detector(net, feat)))):
            rng = RngStream(cfg["seed"], 100 + 2 * i + j)
            p, se = comms.ser_monte_carlo(det, c, s2, cfg["trials"], rng, workers=cfg["workers"])
            rows.append((name, s2, cfg["trials"], p, se))
    comms.write_ser_csv(rows, os.path.join(out, "ser.csv"))
    _regions(cfg, c, net, out)
    summary = ", ".join(f"{r[0]}@{r[1]:.4g}: {r[3]:.4g}" for r in rows)
    return f"SER {summary}"


def run_regions(cfg, out):
    c, net, history = _detector_setup(cfg, out)
    _regions(cfg, c, net, out)
    return "wrote detection regions"


def run_approx_waterfill(cfg, out):
    k, power, tol = cfg["channels"], cfg["total_power"], cfg["tol"]
    sampler = approx.waterfill_sampler(k, cfg["gain_low"], cfg["gain_high"])
    oracle = lambda g: approx.waterfill(approx.WaterfillingProblem(g, power), tol)
    data = approx.generate_algorithm_dataset(oracle, sampler, cfg["samples"], RngStream(cfg["seed"], 20))
    widths = (k, *cfg["hidden"], k)
    acts = ["relu"] * len(cfg["hidden"]) + ["identity"]
    net, holdout_nmse = approx.train_surrogate(data, widths, acts, _train_config(cfg, "mse"))
    save_network(net, os.path.join(out, "surrogate.net"))
    bench = sampler(RngStream(cfg["seed"], 21), cfg["bench_batch"])
    report = approx.benchmark_speedup(lambda b: approx.waterfill_batch(b, power, tol), net, bench)
    approx.write_report_csv(
        os.path.join(out, "surrogate.csv"),
        ["holdout_nmse", "bench_batch", "max_deviation", "mean_deviation"],
        [(holdout_nmse, report.batch_size, report.max_deviation, report.mean_deviation)],
    )
    with open(os.path.join(out, "timing.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"oracle_time = {report.oracle_time!r}\n")
        fh.write(f"surrogate_time = {report.surrogate_time!r}\n")
        fh.write(f"speedup = {report.speedup!r}\n")
    return f"holdout NMSE {holdout_nmse:.4g}, speedup {report.speedup:.4g}x"


def unfold_noise_variance(snr_db: float, n_t: int = 2) -> float:
    """Noise variance giving ``snr_db`` per receive antenna with unit-variance channel taps."""
    return n_t / 10.0 ** (snr_db / 10.0)


def run_approx_unfold(cfg, out):
    sig2 = unfold_noise_variance(cfg["snr_db"])
    sampler = approx.gaussian_channels(2, 2)
    base = approx.UnfoldedDetector.with_fixed_step(np.eye(2), cfg["layers"])
    tc = _train_config(cfg, "mse")
    trained, history = approx.train_unfolded(base, sampler, sig2, cfg["samples"], tc)
    approx.save_unfolded(trained, os.path.join(out, "unfolded.txt"))
    _write_loss(history, os.path.join(out, "loss.csv"))
    h, x, r = approx.bpsk_mimo_batch(sampler, sig2, cfg["trials"], RngStream(cfg["seed"], 30))
    rows = []
    for name, dec in (
        ("untrained", approx.unfolded_forward(base, r, h)),
        ("trained", approx.unfolded_forward(trained, r, h)),
        ("ml", approx.ml_detect_bpsk(h, r)),
    ):
        p = approx.bpsk_error_rate(dec, x)
        rows.append((name, cfg["snr_db"], cfg["trials"], p, math.sqrt(p * (1 - p) / x.size)))
    approx.write_report_csv(os.path.join(out, "ber.csv"), ["detector", "snr_db", "trials", "ber", "std_err"], rows)
    return "BER " + ", ".join(f"{r[0]}: {r[3]:.4g}" for r in rows)


def run_invert(cfg, out):
    g = _nonlinearity(cfg)
    var = cfg["input_variance"]
    sampler = inversion.biased_sampler(var) if cfg["biased"] else inversion.gaussian_sampler(var)
    widths = (1, *cfg["hidden"], 1)
    acts = [cfg["hidden_activation"]] * len(cfg["hidden"]) + ["identity"]
    net, holdout_nmse = inversion.train_inverse(g, sampler, cfg["samples"], widths, acts, _train_config(cfg, "mse"))
    save_network(net, os.path.join(out, "inverse.net"))
    bd = inversion.bussgang_decompose(g, var, cfg["bussgang_samples"], RngStream(cfg["seed"], 40))
    rep = inversion.evaluate_inverse(
        net, bd, g, inversion.gaussian_sampler(var), cfg["trials"], RngStream(cfg["seed"], 41)
    )
    inversion.write_comparison_csv([(g, rep)], os.path.join(out, "comparison.csv"))
    approx.write_report_csv(
        os.path.join(out, "error_quantiles.csv"),
        ["quantile", "abs_error"],
        [(float(q), v) for q, v in rep.error_quantiles().items()],
    )
    approx.write_report_csv(os.path.join(out, "holdout.csv"), ["holdout_nmse"], [(holdout_nmse,)])
    return f"learned NMSE {rep.learned_nmse:.4g}, Bussgang NMSE {rep.bussgang_nmse:.4g}, gain {rep.gain_db:.4g} dB"


def run_bussgang(cfg, out):
    g = _nonlinearity(cfg)
    bd = inversion.bussgang_decompose(g, cfg["input_variance"], cfg["samples"], RngStream(cfg["seed"], 40))
    approx.write_report_csv(
        os.path.join(out, "bussgang.csv"),
        ["kind", "params", "gain", "residual_variance", "input_variance", "samples", "residual_correlation"],
        [(g.kind, g.describe(), bd.gain, bd.residual_variance, bd.input_variance, bd.sample_count,
          bd.residual_correlation)],
    )
    return f"D = {bd.gain:.4g}, residual variance {bd.residual_variance:.4g}"


RUNNERS = {
    "detect-train": run_detect_train,
    "detect-eval": run_detect_eval,
    "regions": run_regions,
    "approx-waterfill": run_approx_waterfill,
    "approx-unfold": run_approx_unfold,
    "invert": run_invert,
    "bussgang": run_bussgang,
}


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(path, cfg: dict[str, Any], wall_clock: float) -> None:
    lines = [
        f"# phylearn manifest v{MANIFEST_VERSION}",
        f"# package_version = {__version__}",
        f"# wall_clock_seconds = {wall_clock:.6f}",
    ]
    for key in sorted(cfg):
        if cfg[key] is not None and key != "out":
            lines.append(f"{key} = {_format_value(cfg[key])}")
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _fail(kind: str, field: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"error kind={kind} field={field} msg={message}", file=sys.stderr)
    return code


def run(command: str, config_path, out: str | None = None) -> int:
    """Validate, execute one experiment and write its artifacts. Returns the exit status."""
    if command not in RUNNERS:
        return _fail("validation", "experiment", f"unknown experiment kind {command!r}", 1)
    try:
        cfg = resolve(command, read_config(config_path))
        out_dir = out or cfg["out"]
        if not out_dir:
            raise ConfigError("out", "no output directory (set 'out' or pass --out)")
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise ConfigError("out", f"cannot create {out_dir}: {exc.strerror}") from None
        if not os.access(out_dir, os.W_OK):
            raise ConfigError("out", f"{out_dir} is not writable")
    except ConfigError as exc:
        return _fail("validation", exc.field, str(exc), 1)

    start = time.perf_counter()
    try:
        summary = RUNNERS[command](cfg, out_dir)
    except (ParseError, InvalidParameterError) as exc:
        return _fail("validation", "input", str(exc), 1)
    except Exception as exc:  # noqa: BLE001 - surfaced as a single-line runtime error
        return _fail("runtime", type(exc).__name__, str(exc), 2)
    write_manifest(os.path.join(out_dir, "manifest.txt"), cfg, time.perf_counter() - start)
    print(f"{command}: {summary}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="phylearn", description=__doc__.splitlines()[0])
    parser.add_argument("command", help="one of: " + ", ".join(RUNNERS))
    parser.add_argument("--config", required=True, help="key = value experiment config")
    parser.add_argument("--out", default=None, help="output directory (overrides 'out' in the config)")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
