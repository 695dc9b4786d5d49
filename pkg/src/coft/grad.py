"""Parameter registry, first-order optimizers, a finite-difference gradient
verifier, and the checkpoint file format.

Gradients in this package are hand-derived per loss; the verifier here is the
independent check that keeps them honest. Losses accumulate into
``ParamTensor.grad`` and an optimizer ``step`` consumes and zeroes the grads.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .core import as_f64
from .errors import ContractError, DomainError, ShapeError, TrainingError

__all__ = [
    "ParamTensor",
    "param",
    "accumulate_grad",
    "zero_grads",
    "SgdMomentum",
    "Adam",
    "step",
    "GradCheckReport",
    "check_gradients",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class ParamTensor:
    """A named trainable array with an accumulated gradient of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def param(name: str, value) -> ParamTensor:
    v = np.array(value, dtype=np.float64)
    return ParamTensor(name=name, value=v, grad=np.zeros_like(v))


def accumulate_grad(p: ParamTensor, contribution) -> ParamTensor:
    """grad += contribution, elementwise. Shapes must match exactly."""
    c = as_f64(contribution)
    if c.shape != p.grad.shape:
        raise ShapeError(
            f"gradient contribution for {p.name!r} has shape {c.shape}, expected {p.grad.shape}"
        )
    p.grad += c
    return p


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


class SgdMomentum:
    """SGD with classical momentum: buf = m*buf + g; value -= lr*buf."""

    kind = "sgd-momentum"

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        if learning_rate < 0:
            raise DomainError("learning rate must be nonnegative")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.step_count = 0
        self._buf: dict[str, np.ndarray] = {}

    def _update(self, p: ParamTensor):
        buf = self._buf.get(p.name)
        if buf is None:
            buf = np.zeros_like(p.value)
            self._buf[p.name] = buf
        elif buf.shape != p.value.shape:
            raise ShapeError(f"optimizer state for {p.name!r} has stale shape {buf.shape}")
        buf *= self.momentum
        buf += p.grad
        p.value -= self.learning_rate * buf

    def hyper(self) -> dict:
        return {"learning_rate": self.learning_rate, "momentum": self.momentum}

    def state_entries(self):
        return [(f"buf/{name}", arr) for name, arr in sorted(self._buf.items())]

    def load_state(self, entries: dict[str, np.ndarray]):
        self._buf = {name[len("buf/"):]: arr for name, arr in entries.items()}

    @classmethod
    def from_hyper(cls, hyper: dict, step_count: int):
        opt = cls(hyper["learning_rate"], hyper["momentum"])
        opt.step_count = step_count
        return opt


class Adam:
    """Adam with bias correction; one shared step counter for all params."""

    kind = "adam"

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if learning_rate < 0:
            raise DomainError("learning rate must be nonnegative")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _update(self, p: ParamTensor):
        m = self._m.get(p.name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
            self._m[p.name], self._v[p.name] = m, v
        else:
            v = self._v[p.name]
            if m.shape != p.value.shape:
                raise ShapeError(f"optimizer state for {p.name!r} has stale shape {m.shape}")
        t = self.step_count  # incremented by step() before updates
        m *= self.beta1
        m += (1.0 - self.beta1) * p.grad
        v *= self.beta2
        v += (1.0 - self.beta2) * p.grad**2
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        p.value -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def hyper(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    def state_entries(self):
        out = [(f"m/{name}", arr) for name, arr in sorted(self._m.items())]
        out += [(f"v/{name}", arr) for name, arr in sorted(self._v.items())]
        return out

    def load_state(self, entries: dict[str, np.ndarray]):
        self._m = {n[len("m/"):]: a for n, a in entries.items() if n.startswith("m/")}
        self._v = {n[len("v/"):]: a for n, a in entries.items() if n.startswith("v/")}

    @classmethod
    def from_hyper(cls, hyper: dict, step_count: int):
        opt = cls(hyper["learning_rate"], hyper["beta1"], hyper["beta2"], hyper["eps"])
        opt.step_count = step_count
        return opt


_OPTIMIZER_KINDS = {SgdMomentum.kind: SgdMomentum, Adam.kind: Adam}


def step(opt, params) -> None:
    """Apply one optimizer step to every param, then zero all grads.

    Raises TrainingError (naming the parameter) on any non-finite gradient
    before the update, or non-finite value after it.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {p.name!r}", param_name=p.name)
    opt.step_count += 1
    for p in params:
        with np.errstate(over="ignore", invalid="ignore"):
            opt._update(p)
        if not np.all(np.isfinite(p.value)):
            raise TrainingError(f"non-finite value in {p.name!r} after step", param_name=p.name)
        p.zero_grad()


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    max_rel_error: float = 0.0
    per_param: dict = field(default_factory=dict)  # name -> max rel error
    failures: list = field(default_factory=list)  # (name, flat_index, analytic, fd, rel)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "OK" if self.ok else f"FAIL ({len(self.failures)} components)"
        lines = [f"gradient check {status}: max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e})"]
        for name, err in self.per_param.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def check_gradients(loss_fn, params, eps: float = 1e-5, tol: float = 1e-4,
                    rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must return the scalar loss and, as a side effect, accumulate
    gradients into ``params``. It must be deterministic; two baseline
    evaluations that disagree raise ContractError. Components whose analytic
    and numeric magnitudes both fall below ``rel_floor`` are compared
    absolutely against ``rel_floor * tol``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise DomainError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    zero_grads(params)
    loss0 = float(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)
    loss1 = float(loss_fn())
    if loss0 != loss1:
        raise ContractError(
            f"loss_fn is not deterministic: {loss0!r} vs {loss1!r}; "
            "fix all stochastic inputs before checking gradients"
        )
    zero_grads(params)

    report = GradCheckReport(tol=tol, eps=eps)
    for p in params:
        flat = p.value.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn())
            flat[i] = orig - eps
            lm = float(loss_fn())
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            a = float(a_flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
            if rel > worst:
                worst = rel
            if rel > tol:
                report.failures.append((p.name, i, a, fd, rel))
        report.per_param[p.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    zero_grads(params)
    return report


# ---------------------------------------------------------------------------
# Checkpoints: a JSON manifest listing (name, shape, byte offset) per tensor
# plus one flat little-endian float64 payload. Optimizer state lives in the
# same payload under a distinct manifest section.
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "coft-checkpoint-v1"


def _paths(stem: str):
    return stem + ".json", stem + ".f64le"


def save_checkpoint(stem: str, params, optimizer=None) -> str:
    """Write ``<stem>.json`` + ``<stem>.f64le``; returns the manifest path."""
    manifest_path, payload_path = _paths(stem)
    chunks = []
    offset = 0
    entries = []
    for p in params:
        raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append({"name": p.name, "shape": list(p.value.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    opt_section = None
    if optimizer is not None:
        state = []
        for name, arr in optimizer.state_entries():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            state.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        opt_section = {
            "kind": optimizer.kind,
            "step": optimizer.step_count,
            "hyper": optimizer.hyper(),
            "state": state,
        }
    manifest = {"format": _CKPT_FORMAT, "params": entries, "optimizer": opt_section}
    with open(payload_path, "wb") as f:
        f.write(b"".join(chunks))
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest_path


def _read_slice(payload: bytes, entry: dict) -> np.ndarray:
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = entry["offset"]
    arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
    return arr.astype(np.float64).reshape(shape)


def load_checkpoint(stem: str):
    """Read a checkpoint pair; returns (params, optimizer-or-None)."""
    manifest_path, payload_path = _paths(stem)
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != _CKPT_FORMAT:
        raise ContractError(f"unrecognized checkpoint format in {manifest_path}")
    with open(payload_path, "rb") as f:
        payload = f.read()
    params = [param(e["name"], _read_slice(payload, e)) for e in manifest["params"]]
    optimizer = None
    section = manifest.get("optimizer")
    if section is not None:
        cls = _OPTIMIZER_KINDS[section["kind"]]
        optimizer = cls.from_hyper(section["hyper"], section["step"])
        optimizer.load_state({e["name"]: _read_slice(payload, e) for e in section["state"]})
    return params, optimizer


def checkpoint_files_equal(stem_a: str, stem_b: str) -> bool:
    """Byte-for-byte equality of two checkpoint pairs."""
    for a, b in zip(_paths(stem_a), _paths(stem_b)):
        if not (os.path.exists(a) and os.path.exists(b)):
            return False
        with open(a, "rb") as fa, open(b, "rb") as fb:
            if fa.read() != fb.read():
                return False
    return True
