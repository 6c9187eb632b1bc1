"""Command-line interface: a thin client over the HTTP service.

By default each command runs the FastAPI app in-process (no daemon needed);
pass --server URL (or set MSNN_SERVER) to target a running instance started
with `msnn serve`. Either way the service does the work, so CLI and HTTP
behavior cannot drift apart.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

The MSNN_SEED environment variable supplies a global default seed for any
command whose --seed flag is omitted.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings


def _default_seed(value: int | None, fallback: int = 0) -> int:
    if value is not None:
        return value
    env = os.environ.get("MSNN_SEED")
    return int(env) if env else fallback


class ClientError(RuntimeError):
    def __init__(self, status: int, detail) -> None:
        super().__init__(f"service returned {status}: {detail}")
        self.status = status


class Client:
    """POSTs to a remote server or an in-process app, uniformly."""

    def __init__(self, server: str | None) -> None:
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service.app import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> dict:
        response = self._client.post(path, json=payload)
        body = response.json()
        if response.status_code >= 400:
            detail = body.get("detail", body) if isinstance(body, dict) else body
            raise ClientError(response.status_code, detail)
        return body


def _print_result(result: dict) -> None:
    summary = result.get("summary", {})
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    for path in result.get("outputs", []):
        print(f"wrote {path}")


def _parse_pairs(values: list[str]) -> dict[str, str]:
    out = {}
    for item in values:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key] = value
    return out


def _floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",")]


def _band(text: str) -> tuple[float, float]:
    parts = text.replace("-", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"band must be low,high; got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _int_list(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(part) for part in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msnn",
        description="Multi-scale network pipeline for multichannel time series.",
    )
    parser.add_argument("--server", default=os.environ.get("MSNN_SERVER"),
                        help="service URL; default runs the service in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    # synth ------------------------------------------------------------------
    synth = sub.add_parser("synth", help="generate synthetic datasets/records")
    synth_sub = synth.add_subparsers(dest="generator", required=True)

    bp = synth_sub.add_parser("bandpower", help="band-power classes on designated channels")
    bp.add_argument("--out", required=True)
    bp.add_argument("--trials", type=int, default=200)
    bp.add_argument("--channels", type=int, default=8)
    bp.add_argument("--timepoints", type=int, default=256)
    bp.add_argument("--fs", type=float, default=128.0)
    bp.add_argument("--bands", type=_band, nargs="+", default=[(8.0, 12.0), (20.0, 24.0)],
                    help="per-class band, e.g. --bands 8-12 20-24")
    bp.add_argument("--active", type=_int_list, nargs="+", default=[[2, 3], [4, 5]],
                    help="per-class active channels, e.g. --active 2,3 4,5")
    bp.add_argument("--amplitude", type=float, nargs="+", default=[1.5, 1.5])
    bp.add_argument("--noise", type=float, default=1.0)
    bp.add_argument("--seed", type=int, default=None)
    bp.add_argument("--force", action="store_true")

    sv = synth_sub.add_parser("ssvep", help="flicker-frequency classes with second harmonics")
    sv.add_argument("--out", required=True)
    sv.add_argument("--trials", type=int, default=160)
    sv.add_argument("--channels", type=int, default=8)
    sv.add_argument("--timepoints", type=int, default=256)
    sv.add_argument("--fs", type=float, default=128.0)
    sv.add_argument("--freqs", type=_floats, default=[5.45, 6.67, 8.57, 12.0])
    sv.add_argument("--snr", type=float, default=2.0)
    sv.add_argument("--amplitude", type=float, default=1.0)
    sv.add_argument("--seed", type=int, default=None)
    sv.add_argument("--force", action="store_true")

    sz = synth_sub.add_parser("seizure", help="continuous records with burst events")
    sz.add_argument("--out", required=True, help="output directory for record files")
    sz.add_argument("--records", type=int, default=5)
    sz.add_argument("--channels", type=int, default=8)
    sz.add_argument("--fs", type=float, default=64.0)
    sz.add_argument("--duration", type=float, default=150.0)
    sz.add_argument("--events", type=int, default=3)
    sz.add_argument("--event-len", type=float, default=16.0)
    sz.add_argument("--band", type=_band, default=(18.0, 24.0))
    sz.add_argument("--ratio", type=float, default=4.0)
    sz.add_argument("--seed", type=int, default=None)
    sz.add_argument("--force", action="store_true")

    # train ------------------------------------------------------------------
    train = sub.add_parser("train", help="train on an epoch dataset")
    train.add_argument("--data", required=True, help="EPCH dataset path")
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--config", default=None, help="INI config file")
    train.add_argument("--preset", choices=["mi", "ssvep"], default=None)
    train.add_argument("--kernel-sizes", default=None,
                       help="comma list, shorthand for --set model.kernel_sizes=...")
    train.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--force", action="store_true")

    # eval -------------------------------------------------------------------
    ev = sub.add_parser("eval", help="evaluate a checkpoint or run a protocol")
    ev.add_argument("--out", required=True)
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--data", default=None)
    ev.add_argument("--record", default=None, help="RECD file for trace evaluation")
    ev.add_argument("--records", nargs="+", default=None,
                    help="RECD files for leave-one-record-out")
    ev.add_argument("--kfold", type=int, default=None)
    ev.add_argument("--loro", action="store_true", help="leave-one-record-out protocol")
    ev.add_argument("--config", default=None)
    ev.add_argument("--preset", choices=["mi", "ssvep"], default=None)
    ev.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="SECTION.KEY=VALUE")
    ev.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    ev.add_argument("--stride", type=int, default=1, help="window stride in samples")
    ev.add_argument("--threshold", type=float, default=0.8)
    ev.add_argument("--hold", type=float, default=1.0, help="seconds above threshold to fire")
    ev.add_argument("--margin", type=float, default=5.0, help="grace margin around events (s)")
    ev.add_argument("--epoch-len", type=float, default=4.0, help="training epoch length (s, loro)")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--force", action="store_true")

    # analyze ----------------------------------------------------------------
    an = sub.add_parser("analyze", help="interpretability artifacts from a checkpoint")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--data", required=True)
    an.add_argument("--out", required=True)
    an.add_argument("--analyses", default="lrp,patterns,features,psd,relevance-spectrum",
                    help="comma list: lrp,patterns,features,psd,relevance-spectrum")
    an.add_argument("--class", dest="target_class", type=int, default=1)
    an.add_argument("--branch", type=_int_list, default=None, help="e.g. 1..3 or 1,3")
    an.add_argument("--stage", default="pooled", help="features stage: branchK or pooled")
    an.add_argument("--channel", default=None, help="channel name or index for PSD")
    an.add_argument("--limit", type=int, default=8, help="epochs per relevance analysis")
    an.add_argument("--epsilon", type=float, default=1e-6)
    an.add_argument("--force", action="store_true")

    # serve ------------------------------------------------------------------
    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8321)

    return parser


def _dispatch(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    client = Client(args.server)
    if args.command == "synth":
        if args.generator == "bandpower":
            n_classes = len(args.bands)
            if len(args.active) != n_classes:
                parser.error("--bands and --active must list one entry per class")
            amplitudes = args.amplitude
            if len(amplitudes) == 1:
                amplitudes = amplitudes * n_classes
            if len(amplitudes) != n_classes:
                parser.error("--amplitude must list one value (or one per class)")
            payload = {
                "kind": "bandpower",
                "out": args.out,
                "trials": args.trials,
                "channels": args.channels,
                "timepoints": args.timepoints,
                "fs": args.fs,
                "bands": [list(b) for b in args.bands],
                "active_channels": args.active,
                "amplitudes": amplitudes,
                "noise_sigma": args.noise,
                "seed": _default_seed(args.seed),
                "force": args.force,
            }
        elif args.generator == "ssvep":
            payload = {
                "kind": "ssvep",
                "out": args.out,
                "trials": args.trials,
                "channels": args.channels,
                "timepoints": args.timepoints,
                "fs": args.fs,
                "freqs": args.freqs,
                "snr": args.snr,
                "amplitude": args.amplitude,
                "seed": _default_seed(args.seed),
                "force": args.force,
            }
        else:
            payload = {
                "kind": "seizure",
                "out": args.out,
                "records": args.records,
                "channels": args.channels,
                "fs": args.fs,
                "duration_s": args.duration,
                "events": args.events,
                "event_s": args.event_len,
                "burst_band": list(args.band),
                "amplitude_ratio": args.ratio,
                "seed": _default_seed(args.seed),
                "force": args.force,
            }
        return client.post("/synth", payload)

    if args.command == "train":
        overrides = _parse_pairs(args.overrides)
        if args.kernel_sizes is not None:
            if args.preset is not None:
                parser.error("--preset conflicts with --kernel-sizes")
            overrides["model.kernel_sizes"] = args.kernel_sizes
        payload = {
            "data": args.data,
            "out": args.out,
            "config": args.config,
            "preset": args.preset,
            "overrides": overrides,
            "seed": _default_seed(args.seed),
            "force": args.force,
        }
        return client.post("/train", payload)

    if args.command == "eval":
        modes = sum([args.kfold is not None, args.record is not None, args.loro])
        if modes > 1:
            parser.error("choose one of --kfold, --record, --loro")
        if args.loro and not args.records:
            parser.error("--loro needs --records")
        if args.kfold is not None and not args.data:
            parser.error("--kfold needs --data")
        if modes == 0 and not (args.checkpoint and args.data):
            parser.error("epoch evaluation needs --checkpoint and --data")
        payload = {
            "out": args.out,
            "checkpoint": args.checkpoint,
            "data": args.data,
            "record": args.record,
            "records": args.records,
            "kfold": args.kfold,
            "loro": args.loro,
            "config": args.config,
            "preset": args.preset,
            "overrides": _parse_pairs(args.overrides),
            "seed": _default_seed(args.seed),
            "jobs": args.jobs,
            "stride": args.stride,
            "threshold": args.threshold,
            "min_hold_s": args.hold,
            "margin_s": args.margin,
            "epoch_s": args.epoch_len,
            "force": args.force,
        }
        return client.post("/eval", payload)

    if args.command == "analyze":
        payload = {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "out": args.out,
            "analyses": [a for a in args.analyses.split(",") if a],
            "target_class": args.target_class,
            "branches": args.branch,
            "stage": args.stage,
            "channel": args.channel,
            "limit": args.limit,
            "epsilon": args.epsilon,
            "force": args.force,
        }
        return client.post("/analyze", payload)

    raise AssertionError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    try:
        result = _dispatch(args, parser)
    except ClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if exc.status == 422 else 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _print_result(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
