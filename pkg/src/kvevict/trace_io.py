"""Binary trace container, key=value config files and CSV reports.

Trace file layout (all integers unsigned 32-bit little-endian)::

    b"A2TR"                    magic
    format_version             currently 1
    n_layers, n_heads, seq_len
    provenance_len, provenance UTF-8 bytes
    payload                    for q in 0..T-1, for (layer, head): q+1 float64 LE
    checksum                   uint64 LE, BLAKE2b-64 of the payload bytes

Config files are flat ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attn_model import AttentionTrace, TraceGenConfig, check_trace_invariants
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    ConfigError,
    NothingToWriteError,
    TruncatedTraceError,
    UnsupportedVersionError,
)
from .scoring import Policy

MAGIC = b"A2TR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

CSV_HEADER = ["policy", "alpha", "budget", "layer", "head", "cosine", "mask_overlap", "output_drift", "seed"]


def payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _pack_payload(scores: np.ndarray) -> bytes:
    L, H, T, _ = scores.shape
    parts = [scores[:, :, q, : q + 1].reshape(L * H * (q + 1)) for q in range(T)]
    flat = np.concatenate(parts) if parts else np.empty(0)
    return flat.astype("<f8").tobytes()


def encode_trace(trace: AttentionTrace) -> bytes:
    trace.validate()
    provenance = json.dumps(
        {"meta": trace.meta, "token_labels": trace.token_labels}, sort_keys=True, default=str
    ).encode("utf-8")
    payload = _pack_payload(trace.scores)
    return b"".join(
        [
            _HEADER.pack(MAGIC, FORMAT_VERSION, trace.n_layers, trace.n_heads, trace.seq_len),
            _U32.pack(len(provenance)),
            provenance,
            payload,
            _U64.pack(payload_checksum(payload)),
        ]
    )


def decode_trace(data: bytes) -> AttentionTrace:
    if len(data) < _HEADER.size:
        raise TruncatedTraceError("file shorter than the trace header")
    magic, version, L, H, T = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"BadMagic: expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"UnsupportedVersion: format version {version}")
    off = _HEADER.size
    if len(data) < off + _U32.size:
        raise TruncatedTraceError("file ends inside the provenance length")
    (plen,) = _U32.unpack_from(data, off)
    off += _U32.size
    n_reals = L * H * T * (T + 1) // 2
    expected = off + plen + 8 * n_reals + _U64.size
    if len(data) < expected:
        raise TruncatedTraceError(f"TruncatedTrace: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise TruncatedTraceError(f"trailing bytes after checksum ({len(data) - expected})")
    provenance = data[off : off + plen]
    off += plen
    payload = data[off : off + 8 * n_reals]
    (stored,) = _U64.unpack_from(data, off + 8 * n_reals)
    if stored != payload_checksum(payload):
        raise ChecksumMismatchError("ChecksumMismatch: payload checksum does not match")

    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    scores = np.zeros((L, H, T, T))
    pos = 0
    for q in range(T):
        n = L * H * (q + 1)
        scores[:, :, q, : q + 1] = flat[pos : pos + n].reshape(L, H, q + 1)
        pos += n
    check_trace_invariants(scores)

    try:
        info = json.loads(provenance.decode("utf-8")) if provenance else {}
    except (UnicodeDecodeError, json.JSONDecodeError):
        info = {"meta": {"provenance": provenance.decode("utf-8", "replace")}}
    return AttentionTrace(scores, token_labels=info.get("token_labels"), meta=info.get("meta") or {})


def write_trace(trace: AttentionTrace, destination) -> int:
    """Write ``trace`` and return the payload checksum."""
    data = encode_trace(trace)
    path = Path(destination)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc
    return _U64.unpack_from(data, len(data) - _U64.size)[0]


def read_trace(source) -> AttentionTrace:
    path = Path(source)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read trace from {path}: {exc}") from exc
    return decode_trace(data)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.6g}"


def report_rows(reports) -> list[list[str]]:
    """Flatten reports into CSV rows sorted by (policy, alpha, budget).

    Each report is followed by an ``AVERAGE`` row over its heads.
    """
    if not reports:
        raise NothingToWriteError("NothingToWrite: no reports given")

    def key(r):
        return (r.policy, -1.0 if r.alpha is None else r.alpha, r.budget)

    out = []
    for r in sorted(reports, key=key):
        drift = _fmt(r.output_drift)
        L, H = np.shape(r.cosine)
        for l in range(L):
            for h in range(H):
                out.append(
                    [r.policy, _fmt(r.alpha), _fmt(r.budget), str(l), str(h),
                     _fmt(r.cosine[l][h]), _fmt(r.mask_overlap[l][h]), drift, _fmt(r.seed)]
                )
        out.append(
            [r.policy, _fmt(r.alpha), _fmt(r.budget), "AVERAGE", "AVERAGE",
             _fmt(r.mean_cosine), _fmt(r.mean_overlap), drift, _fmt(r.seed)]
        )
    return out


def render_report_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report_rows(reports))
    return buf.getvalue()


def write_report_csv(reports, destination) -> None:
    text = render_report_csv(reports)
    Path(destination).write_text(text, encoding="utf-8")


def write_mask_dump(mask: np.ndarray, directory, prefix: str = "mask") -> list[Path]:
    """One dense 0/1 text matrix per (layer, head), rows = steps, columns = keys."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    L, H = mask.shape[:2]
    for l in range(L):
        for h in range(H):
            p = directory / f"{prefix}_l{l}_h{h}.txt"
            np.savetxt(p, mask[l, h].astype(int), fmt="%d")
            paths.append(p)
    return paths


# --------------------------------------------------------------------------
# key=value configs
# --------------------------------------------------------------------------


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip().lower().replace("-", "_")] = v.strip()
    return out


def parse_hitters(text: str) -> tuple[tuple[int, float], ...]:
    """``"5:3.0,17:2.5"`` -> ``((5, 3.0), (17, 2.5))``."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        idx, _, strength = item.partition(":")
        try:
            out.append((int(idx), float(strength) if strength else 1.0))
        except ValueError as exc:
            raise ConfigError(f"bad heavy-hitter entry {item!r}") from exc
    return tuple(out)


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


_GEN_KEYS = {
    "len": ("seq_len", int),
    "seq_len": ("seq_len", int),
    "layers": ("n_layers", int),
    "heads": ("n_heads", int),
    "sink": ("sink_strength", float),
    "locality": ("locality_strength", float),
    "locality_window": ("locality_window", int),
    "window": ("locality_window", int),
    "hitters": ("heavy_hitters", parse_hitters),
    "temp": ("noise_temperature", float),
    "seed": ("seed", int),
}


def gen_config_from_kv(kv: dict[str, str]) -> TraceGenConfig:
    fields = {}
    for k, v in kv.items():
        if k not in _GEN_KEYS:
            raise ConfigError(f"unknown generator key {k!r}")
        name, conv = _GEN_KEYS[k]
        try:
            fields[name] = conv(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r}") from exc
    if "seq_len" not in fields:
        raise ConfigError("generator config needs len")
    return TraceGenConfig(**fields)


@dataclass
class ExperimentConfig:
    policies: list[Policy]
    trace: str | None = None
    gen: TraceGenConfig | None = None
    cache_ratio: float | None = None
    budget: int | None = None
    mode: str = "replay"
    renormalize: bool = True
    out: str | None = None
    seed: int = 0
    decoder: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.policies:
            raise ConfigError("experiment needs at least one policy")
        if self.mode not in ("replay", "live"):
            raise ConfigError(f"mode must be replay or live, got {self.mode!r}")
        if (self.cache_ratio is None) == (self.budget is None):
            raise ConfigError("give exactly one of cache_ratio and budget")
        if self.cache_ratio is not None and not 0 < self.cache_ratio <= 1:
            raise ConfigError(f"cache_ratio must be in (0, 1], got {self.cache_ratio}")
        if self.budget is not None and self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.mode == "replay" and self.trace is None and self.gen is None:
            raise ConfigError("replay mode needs a trace file or generator settings")


_DECODER_KEYS = ("layers", "heads", "d_head", "vocab", "len")


def experiment_config_from_kv(kv: dict[str, str]) -> ExperimentConfig:
    kv = dict(kv)
    policies = [Policy.parse(p) for p in kv.pop("policies", kv.pop("policy", "")).split(",") if p.strip()]
    gen_kv = {k[4:]: kv.pop(k) for k in list(kv) if k.startswith("gen_")}
    decoder = {k: int(kv.pop(k)) for k in _DECODER_KEYS if k in kv}
    try:
        cfg = ExperimentConfig(
            policies=policies,
            trace=kv.pop("trace", None),
            gen=gen_config_from_kv(gen_kv) if gen_kv else None,
            cache_ratio=float(kv.pop("cache_ratio")) if "cache_ratio" in kv else None,
            budget=int(kv.pop("budget")) if "budget" in kv else None,
            mode=kv.pop("mode", "replay"),
            renormalize=_bool(kv.pop("renormalize", "true")),
            out=kv.pop("out", None),
            seed=int(kv.pop("seed", "0")),
            decoder=decoder,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if kv:
        raise ConfigError(f"unknown experiment keys: {', '.join(sorted(kv))}")
    return cfg


def load_gen_config(path) -> TraceGenConfig:
    return gen_config_from_kv(parse_kv(Path(path).read_text(encoding="utf-8")))


def load_experiment_config(path) -> ExperimentConfig:
    return experiment_config_from_kv(parse_kv(Path(path).read_text(encoding="utf-8")))
