"""Single-file binary checkpoint container.

Layout: magic, format version, length-prefixed canonical JSON header, raw
little-endian float64 parameter/moment payload, and a trailing SHA-256
digest of everything before it. Saving the same checkpoint twice produces
identical bytes, and any payload tampering fails the digest check.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigMismatch, CorruptCheckpoint, WriteFailure

MAGIC = b"DMDNCKPT"
FORMAT_VERSION = 1


def config_hash(*config_dicts: dict) -> str:
    """Stable digest of one or more config mappings."""
    blob = json.dumps(list(config_dicts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclasses.dataclass
class Checkpoint:
    """Everything needed to resume training exactly: parameters, optimizer
    moments, epoch/step counters, RNG states, and config identity."""

    params: dict[str, np.ndarray]  # float64 copies, insertion-ordered
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    epoch: int
    global_step: int
    rng_numpy: dict
    rng_torch: str  # hex-encoded generator state
    config_hash: str
    stage_boundaries: dict[str, int] = dataclasses.field(default_factory=dict)
    meta: dict = dataclasses.field(default_factory=dict)

    def save(self, path: Path) -> None:
        path = Path(path)
        names = list(self.params.keys())
        header = {
            "format_version": FORMAT_VERSION,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "opt_step": self.opt_step,
            "stage_boundaries": self.stage_boundaries,
            "meta": self.meta,
            "rng": {"numpy": self.rng_numpy, "torch": self.rng_torch},
            "params": [
                {"name": n, "shape": list(self.params[n].shape)} for n in names
            ],
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode(
            "utf-8"
        )
        chunks = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)), header_bytes]
        for table in (self.params, self.opt_m, self.opt_v):
            for n in names:
                chunks.append(np.ascontiguousarray(table[n], dtype="<f8").tobytes())
        body = b"".join(chunks)
        digest = hashlib.sha256(body).digest()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(body + digest)
        except OSError as exc:
            raise WriteFailure(f"could not write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path: Path, expect_config_hash: str | None = None) -> "Checkpoint":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
            raise CorruptCheckpoint(f"{path} is not a checkpoint file")
        body, digest = raw[:-32], raw[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CorruptCheckpoint(f"{path} failed its content digest check")
        off = len(MAGIC)
        version, header_len = struct.unpack_from("<IQ", body, off)
        off += 12
        if version != FORMAT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint format version {version}")
        header = json.loads(body[off : off + header_len].decode("utf-8"))
        off += header_len

        def read_table():
            nonlocal off
            table: dict[str, np.ndarray] = {}
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                n_bytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
                arr = np.frombuffer(body, dtype="<f8", count=n_bytes // 8, offset=off)
                table[entry["name"]] = arr.reshape(shape).copy()
                off += n_bytes
            return table

        params = read_table()
        opt_m = read_table()
        opt_v = read_table()
        if off != len(body):
            raise CorruptCheckpoint(f"{path} has trailing or missing payload bytes")
        ckpt = cls(
            params=params,
            opt_m=opt_m,
            opt_v=opt_v,
            opt_step=int(header["opt_step"]),
            epoch=int(header["epoch"]),
            global_step=int(header["global_step"]),
            rng_numpy=header["rng"]["numpy"],
            rng_torch=header["rng"]["torch"],
            config_hash=header["config_hash"],
            stage_boundaries={k: int(v) for k, v in header["stage_boundaries"].items()},
            meta=header["meta"],
        )
        if expect_config_hash is not None and ckpt.config_hash != expect_config_hash:
            raise ConfigMismatch(
                f"checkpoint config hash {ckpt.config_hash[:12]}... does not match "
                f"expected {expect_config_hash[:12]}..."
            )
        return ckpt

    @classmethod
    def capture(
        cls,
        model: torch.nn.Module,
        optimizer,
        epoch: int,
        global_step: int,
        np_rng: np.random.Generator,
        torch_gen: torch.Generator,
        cfg_hash: str,
        stage_boundaries: dict[str, int] | None = None,
        meta: dict | None = None,
    ) -> "Checkpoint":
        params = {
            name: p.detach().cpu().numpy().astype(np.float64)
            for name, p in model.named_parameters()
        }
        opt_m, opt_v = optimizer.state_arrays()
        return cls(
            params=params,
            opt_m=opt_m,
            opt_v=opt_v,
            opt_step=optimizer.step_count,
            epoch=epoch,
            global_step=global_step,
            rng_numpy=np_rng.bit_generator.state,
            rng_torch=torch_gen.get_state().numpy().tobytes().hex(),
            config_hash=cfg_hash,
            stage_boundaries=dict(stage_boundaries or {}),
            meta=dict(meta or {}),
        )

    def apply(
        self,
        model: torch.nn.Module,
        optimizer=None,
        np_rng: np.random.Generator | None = None,
        torch_gen: torch.Generator | None = None,
    ) -> None:
        """Restore parameters (and optionally optimizer + RNG state)."""
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            raise ConfigMismatch(
                "checkpoint parameter names do not match the model"
            )
        with torch.no_grad():
            for name, p in named.items():
                arr = self.params[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ConfigMismatch(
                        f"parameter {name} has shape {tuple(p.shape)}, "
                        f"checkpoint holds {tuple(arr.shape)}"
                    )
                p.copy_(torch.from_numpy(arr).to(p.dtype))
        if optimizer is not None:
            optimizer.load_state_arrays(self.opt_m, self.opt_v, self.opt_step)
        if np_rng is not None:
            np_rng.bit_generator.state = self.rng_numpy
        if torch_gen is not None:
            state = np.frombuffer(bytes.fromhex(self.rng_torch), dtype=np.uint8)
            torch_gen.set_state(torch.from_numpy(state.copy()))
