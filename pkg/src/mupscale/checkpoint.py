"""Checkpoint files: a JSON header followed by little-endian float64 arrays.

Layout::

    8 bytes   magic  b"MUPCKPT\\0"
    4 bytes   format version (uint32 LE)
    8 bytes   header length in bytes (uint64 LE)
    ...       UTF-8 JSON header (sorted keys)
    ...       model arrays, then optimizer buffers, each C-order <f8

The header lists every array's name and shape in payload order, so a reader
never needs to guess sizes. Floats in the header are written by ``json`` with
shortest round-trip repr, so hyperparameters also survive bit-exactly.
"""

from dataclasses import dataclass, field

from .exceptions import InvalidParameterError, VersionMismatchError
from .model import MlpModel, MlpSpec
from .mup import BaseConstants, ResolvedHParams, classify
from .optim import pack, read_arrays, state_arrays, state_from_header, state_header, unpack

MAGIC = b"MUPCKPT\x00"
VERSION = 1


@dataclass
class Checkpoint:
    """Model weights, optimizer state and the metadata needed to resume or upscale.

    ``meta`` carries the parametrization tag, base constants, homogeneity
    degree, seed lineage and data description.
    """

    model: MlpModel
    state: object = None
    hp: ResolvedHParams = None
    meta: dict = field(default_factory=dict)

    @property
    def step(self):
        return 0 if self.state is None else self.state.t

    @property
    def parametrization(self):
        return self.meta.get("parametrization")

    @property
    def base(self):
        b = self.meta.get("base")
        return None if b is None else BaseConstants(**b)

    @property
    def seed_lineage(self):
        return list(self.meta.get("seed_lineage", []))

    def header(self):
        spec = self.model.spec
        return {
            "format": "mupscale-checkpoint",
            "spec": spec.to_dict(),
            "kinds": [k.to_dict() for k in classify(spec)],
            "multipliers": list(self.model.multipliers),
            "params": [{"name": n, "shape": list(s)} for n, s in zip(spec.param_names(), spec.param_shapes())],
            "step": self.step,
            "hparams": None if self.hp is None else self.hp.to_dict(),
            "optimizer": None if self.state is None else state_header(self.state),
            "meta": self.meta,
        }

    def to_bytes(self):
        arrays = list(self.model.params)
        if self.state is not None:
            arrays += state_arrays(self.state)
        return pack(MAGIC, VERSION, self.header(), arrays)

    @classmethod
    def from_bytes(cls, buf):
        buf = bytes(buf)
        header, offset = unpack(buf, MAGIC, VERSION)
        try:
            spec = MlpSpec.from_dict(header["spec"])
            shapes = [tuple(p["shape"]) for p in header["params"]]
            params, offset = read_arrays(buf, offset, shapes)
            model = MlpModel(spec, params, header["multipliers"])
            state = None
            if header.get("optimizer") is not None:
                opt = header["optimizer"]
                arrays, offset = read_arrays(buf, offset, [tuple(a["shape"]) for a in opt["arrays"]])
                state = state_from_header(opt, arrays)
            hp = None if header.get("hparams") is None else ResolvedHParams.from_dict(header["hparams"])
        except (KeyError, TypeError) as exc:
            raise VersionMismatchError(f"checkpoint header is missing or malformed: {exc}") from None
        if offset != len(buf):
            raise VersionMismatchError(f"{len(buf) - offset} trailing bytes after the payload")
        return cls(model, state, hp, header.get("meta", {}))

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def require_mup(self):
        if self.parametrization != "mup":
            raise InvalidParameterError(
                f"checkpoint parametrization is {self.parametrization!r}; upscaling needs a μP-trained checkpoint"
            )
        if self.base is None or "m" not in self.meta:
            raise InvalidParameterError("checkpoint lacks the base constants or homogeneity degree")


def make_meta(base, m, seed_lineage=(), data=None, parametrization="mup", **extra):
    meta = {
        "parametrization": parametrization,
        "base": base.to_dict(),
        "m": int(m),
        "seed_lineage": list(seed_lineage),
        "data": data,
    }
    meta.update(extra)
    return meta


def arrays_equal(a, b):
    """Bitwise equality of two checkpoints' arrays (NaN-safe)."""
    pa = list(a.model.params) + (state_arrays(a.state) if a.state is not None else [])
    pb = list(b.model.params) + (state_arrays(b.state) if b.state is not None else [])
    return len(pa) == len(pb) and all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(pa, pb))

