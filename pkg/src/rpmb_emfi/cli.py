"""Command-line entry point: ``rpmb-emfi``.

Exit codes: 0 completed, 1 attack failed, 2 configuration error,
3 invariant violation detected while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import subprocess
import sys
from pathlib import Path

from . import __version__
from .campaign import CampaignConfig, ConfigError, InvariantViolation, run_config
from .checks import CheckVariant
from .controller import ControllerError, Device, load_device_profile
from .faults import FaultEngineError
from .host import (
    DeviceServer, HostError, HostSession, InProcessTransport, LoopbackTransport,
)
from .protocol import BLOCK_SIZE, FrameError, ResultCode

EXIT_OK = 0
EXIT_ATTACK_FAILED = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

OUT_ENV = "RPMB_EMFI_OUT"
DEFAULT_OUT = "rpmb-emfi-out"

log = logging.getLogger("rpmb_emfi")


def parse_window(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be START:END in ns, got {text!r}") from None
    if b <= a or a < 0:
        raise argparse.ArgumentTypeError(f"window end must exceed start, got {text!r}")
    return a, b


def parse_cell(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"cell must be X,Y, got {text!r}") from None
    return x, y


def parse_variant(text: str) -> str:
    try:
        return CheckVariant.parse(text).value
    except ValueError:
        choices = ", ".join(v.value for v in CheckVariant)
        raise argparse.ArgumentTypeError(f"unknown variant {text!r} (choose from {choices})") \
            from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", help="device profile name or JSON path (default target1)")
    p.add_argument("--fault-profile", help="fault profile name or JSON path "
                                           "(default: same name as the device profile)")
    p.add_argument("--seed", type=int, help="campaign seed; generated and printed when omitted")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--variant", type=parse_variant, help="HMAC check variant override")
    p.add_argument("--config", help="campaign config JSON; flags override its values")
    p.add_argument("--cell", type=parse_cell, help="probe cell X,Y (default: profile hotspot)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpmb-emfi",
                                     description="RPMB authentication bypass simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="observer-based spatial profiling")
    _common(p)
    p.add_argument("--iterations", type=int, help="pulses per grid cell (default 25)")

    p = sub.add_parser("search", help="random voltage/duration search at one cell")
    _common(p)
    p.add_argument("--trials", type=int, help="number of trials (default 1500)")

    p = sub.add_parser("sweep", help="timing sweep of wrong-MAC writes")
    _common(p)
    p.add_argument("--window", type=parse_window, help="START:END in ns (default 110000:125000)")
    p.add_argument("--step", type=int, help="delay step in ns (default 10)")

    p = sub.add_parser("attack", help="repeat wrong-MAC writes until one is accepted")
    _common(p)
    p.add_argument("--window", type=parse_window, help="START:END in ns (default compare window)")
    p.add_argument("--max-attempts", type=int, help="attempt cap (default 100)")

    for name, text in (("integrity", "attack, then verify user area, RPMB and counter"),
                       ("stress", "pulse the compare window repeatedly and report corruption")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--window", type=parse_window, help="START:END in ns")
        p.add_argument("--max-attempts", type=int, help="attempt cap / repeat count (default 100)")

    p = sub.add_parser("replay", help="re-run a campaign from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("serve", help="serve a device over stdin/stdout (loopback framing)")
    p.add_argument("--state", required=True, help="device snapshot file")
    p.add_argument("--profile", default="target1")
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("rpmb", help="host operations against a persisted device")
    p.add_argument("--state", required=True, help="device snapshot file (created if missing)")
    p.add_argument("--profile", default="target1", help="profile for a new device")
    p.add_argument("--transport", choices=("inprocess", "loopback"), default="inprocess")
    p.add_argument("-v", "--verbose", action="count", default=0)
    ops = p.add_subparsers(dest="op", required=True)
    o = ops.add_parser("program-key")
    o.add_argument("--key", required=True, help="32-byte key as hex")
    o = ops.add_parser("write")
    o.add_argument("--key", required=True, help="32-byte key as hex")
    o.add_argument("--address", type=int, default=0)
    o.add_argument("--data", help="data as hex (multiple of 256 bytes)")
    o.add_argument("--data-file", help="raw data file (multiple of 256 bytes)")
    o = ops.add_parser("read")
    o.add_argument("--address", type=int, default=0)
    o.add_argument("--blocks", type=int, default=1)
    o.add_argument("--key", help="verify the response MAC with this key (hex)")
    o = ops.add_parser("counter")
    o.add_argument("--key", help="verify the response MAC with this key (hex)")
    return parser


# --- campaigns ---------------------------------------------------------------------------

_FLAG_FIELDS = {"profile": "device_profile", "fault_profile": "fault_profile", "seed": "seed",
                "variant": "variant", "window": "window", "step": "step",
                "iterations": "iterations", "trials": "trials", "max_attempts": "max_attempts",
                "cell": "cell"}


def config_from_args(args: argparse.Namespace) -> CampaignConfig:
    base: dict = {}
    if args.config:
        base = CampaignConfig.load(args.config).to_dict()
        if base.get("experiment") != args.command:
            raise ConfigError(f"config is for {base.get('experiment')!r}, "
                              f"not {args.command!r}")
    base["experiment"] = args.command
    for flag, field in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[field] = value
    if base.get("seed") is None:
        base["seed"] = secrets.randbelow(2**32)
        print(f"seed: {base['seed']} (generated)")
    return CampaignConfig.from_dict(base)


def _out_dir(args: argparse.Namespace) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run_campaign(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    out = _out_dir(args)
    files = run_config(config, out)
    return _report(files)


def _report(files: dict[str, Path]) -> int:
    manifest = json.loads(files["manifest.json"].read_text())
    summary = manifest["summary"]
    exp = manifest["config"]["experiment"]
    for name in sorted(files):
        print(f"wrote {files[name]}")
    for key, value in sorted(summary.items()):
        if key not in ("voltage_bands", "duration_bands"):
            print(f"{key}: {json.dumps(value)}")
    if exp == "attack" and not summary["success"]:
        print("attack failed: no wrong-MAC write was accepted")
        return EXIT_ATTACK_FAILED
    if exp == "integrity" and not summary["passed"]:
        print("integrity campaign did not pass")
        return EXIT_ATTACK_FAILED
    return EXIT_OK


def run_replay(args: argparse.Namespace) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    config = CampaignConfig.from_dict(manifest["config"])
    out = Path(args.out) if args.out else Path(args.manifest).parent
    return _report(run_config(config, out))


# --- device state and host operations ------------------------------------------------------

def _load_device(state: Path, profile: str) -> Device:
    if state.exists():
        try:
            return Device.from_snapshot(state.read_bytes())
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load device state {state}: {exc}") from None
    return Device(load_device_profile(profile))


def _hex_bytes(text: str, what: str) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ConfigError(f"{what} is not valid hex") from None


def run_serve(args: argparse.Namespace) -> int:
    state = Path(args.state)
    device = _load_device(state, args.profile)
    DeviceServer(device).serve(sys.stdin.buffer, sys.stdout.buffer)
    state.write_bytes(device.snapshot())
    return EXIT_OK


def run_rpmb(args: argparse.Namespace) -> int:
    state = Path(args.state)
    proc = None
    device = None
    if args.transport == "loopback":
        cmd = [sys.executable, "-m", "rpmb_emfi.cli", "serve", "--state", str(state),
               "--profile", args.profile]
        proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        transport = LoopbackTransport(proc.stdout, proc.stdin)
    else:
        device = _load_device(state, args.profile)
        transport = InProcessTransport(device)
    key = _hex_bytes(args.key, "--key") if getattr(args, "key", None) else None
    # a write key is only used for signing; a wrong one must not break counter reads
    session = HostSession(transport, key=None if args.op in ("write", "program-key") else key)
    try:
        code = _rpmb_op(args, session)
    finally:
        if proc is not None:
            proc.stdin.close()
            proc.wait()
        if device is not None:
            state.write_bytes(device.snapshot())
    return code


def _rpmb_op(args: argparse.Namespace, session: HostSession) -> int:
    if args.op == "program-key":
        result = session.program_key(_hex_bytes(args.key, "--key"))
        print(f"result: {result}")
        return EXIT_OK if result == ResultCode.OPERATION_OK else EXIT_ATTACK_FAILED
    if args.op == "counter":
        counter, verified = session.read_counter()
        print(f"result: {session.counter_result}")
        print(f"counter: {counter}")
        print(f"verified: {str(verified).lower()}")
        return EXIT_OK if session.counter_result == ResultCode.OPERATION_OK else EXIT_ATTACK_FAILED
    if args.op == "write":
        if args.data_file:
            data = Path(args.data_file).read_bytes()
        elif args.data:
            data = _hex_bytes(args.data, "--data")
        else:
            raise ConfigError("write needs --data or --data-file")
        if not data or len(data) % BLOCK_SIZE:
            raise ConfigError(f"data must be a positive multiple of {BLOCK_SIZE} bytes")
        result = session.write_authenticated(args.address, data,
                                             key=_hex_bytes(args.key, "--key"))
        print(f"result: {result}")
        print(f"counter: {session.counter}")
        return EXIT_OK if result == ResultCode.OPERATION_OK else EXIT_ATTACK_FAILED
    if args.op == "read":
        res = session.read_authenticated(args.address, args.blocks)
        print(f"result: {res.result}")
        if res.data:
            print(f"data: {res.data.hex()}")
        print(f"verified: {str(res.verified).lower()}")
        return EXIT_OK if res.result == ResultCode.OPERATION_OK else EXIT_ATTACK_FAILED
    raise ConfigError(f"unknown rpmb operation {args.op!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        if args.command == "rpmb":
            return run_rpmb(args)
        if args.command == "serve":
            return run_serve(args)
        if args.command == "replay":
            return run_replay(args)
        return run_campaign(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, FaultEngineError, FrameError, ControllerError, HostError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
