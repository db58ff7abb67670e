"""Local client training and the algorithm plugin interface.

The model is multinomial logistic regression: convex, with analytic
gradients, so algorithm equivalences (plugin A == plugin B under some
hyperparameters) can be checked exactly instead of statistically. All the
engine-level claims (scheduling, aggregation, state management) are
model-agnostic.

Minibatch order is derived from (seed, client_id, round), never from the
executing device, so a client's computation is identical no matter where or
when the scheduler places it.
"""

from __future__ import annotations

import abc
import enum
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .core import ClientProfile, STREAM_MINIBATCH, stream_rng
from .statestore import ClientState

if TYPE_CHECKING:  # pragma: no cover
    from .aggregate import AggregateResult


class NonFiniteLossError(RuntimeError):
    """Local training diverged; the round is aborted with this diagnostic."""


class AggOp(enum.Enum):
    WEIGHTED_AVERAGE = "WeightedAverage"
    SUM = "Sum"
    SIMPLE_AVERAGE = "SimpleAverage"
    COLLECT = "Collect"


AVERAGING_OPS = (AggOp.WEIGHTED_AVERAGE, AggOp.SUM, AggOp.SIMPLE_AVERAGE)


@dataclass(frozen=True)
class ModelParams:
    weights: np.ndarray  # (n_classes, n_features)
    bias: np.ndarray     # (n_classes,)

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model parameters must be finite")

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.bias.copy())

    @staticmethod
    def zeros(n_classes: int, n_features: int) -> "ModelParams":
        return ModelParams(np.zeros((n_classes, n_features)), np.zeros(n_classes))


@dataclass(frozen=True)
class BundleEntry:
    tensor: np.ndarray
    op: AggOp
    weight: float = 1.0
    client_id: int | None = None

    def __post_init__(self) -> None:
        if self.op is AggOp.WEIGHTED_AVERAGE and not self.weight > 0:
            raise ValueError("WeightedAverage entries require weight > 0")
        if self.op is AggOp.COLLECT and self.client_id is None:
            raise ValueError("Collect entries must carry the originating client_id")


@dataclass
class ParamBundle:
    """Named tensors annotated with how the server combines them.

    Tensors are treated as immutable once added; consumers copy before
    mutating.
    """

    entries: dict[str, BundleEntry] = field(default_factory=dict)

    def add(self, name: str, tensor: np.ndarray, op: AggOp,
            weight: float = 1.0, client_id: int | None = None) -> "ParamBundle":
        if name in self.entries:
            raise ValueError(f"duplicate bundle entry {name!r}")
        self.entries[name] = BundleEntry(np.asarray(tensor, dtype=np.float64),
                                         op, weight, client_id)
        return self

    def tensor(self, name: str) -> np.ndarray:
        return self.entries[name].tensor

    def model(self) -> ModelParams:
        return ModelParams(self.entries["weights"].tensor, self.entries["bias"].tensor)

    def replaced(self, **tensors: np.ndarray) -> "ParamBundle":
        """Copy of this bundle with the named tensors swapped out."""
        out = ParamBundle()
        for name, e in self.entries.items():
            t = tensors.pop(name, e.tensor)
            out.entries[name] = BundleEntry(np.asarray(t, dtype=np.float64),
                                            e.op, e.weight, e.client_id)
        if tensors:
            raise KeyError(f"no such bundle entries: {sorted(tensors)}")
        return out


@dataclass(frozen=True)
class TrainReport:
    client_result: ParamBundle
    new_state: ClientState | None
    samples_processed: int
    measured_seconds: float

    def __post_init__(self) -> None:
        if self.samples_processed > 0 and not self.measured_seconds > 0:
            raise ValueError("measured_seconds must be > 0 when samples were processed")


def _softmax_terms(model: ModelParams, x: np.ndarray):
    z = x @ model.weights.T + model.bias
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return z, lse


def loss_value(model: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    z, lse = _softmax_terms(model, x)
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def loss_and_grad(model: ModelParams, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its analytic gradient for multinomial logistic
    regression: with P = softmax(XW^T + b), grad_W = (P - Y)^T X / B."""
    z, lse = _softmax_terms(model, x)
    p = np.exp(z - lse[:, None])
    rows = np.arange(len(y))
    loss = float(np.mean(lse - z[rows, y]))
    p[rows, y] -= 1.0
    p /= len(y)
    return loss, p.T @ x, p.sum(axis=0)


def evaluate(model: ModelParams, ds) -> tuple[float, float]:
    """Accuracy and mean cross-entropy of `model` on a dataset."""
    if ds.features.shape[1] != model.weights.shape[1] \
            or ds.n_classes != model.weights.shape[0]:
        raise ValueError(
            f"model ({model.weights.shape}) does not match dataset "
            f"({ds.features.shape[1]} features, {ds.n_classes} classes)")
    z, lse = _softmax_terms(model, ds.features)
    acc = float(np.mean(z.argmax(axis=1) == ds.labels))
    loss = float(np.mean(lse - z[np.arange(ds.n_samples), ds.labels]))
    return acc, loss


@dataclass
class LocalContext:
    """Everything a plugin's gradient hook may read during one client task."""

    start_model: ModelParams
    global_bundle: ParamBundle
    state: Mapping[str, np.ndarray] | None
    lr: float
    n_samples: int


class AlgorithmPlugin(abc.ABC):
    """One federated optimization algorithm.

    A plugin defines the local loss gradient, the result bundle a client
    uploads (with per-entry aggregation ops), the per-client persistent state
    (if any), and the server-side update rule applied to the aggregate.
    Stateless plugins never see ClientState.
    """

    name: str
    is_stateful: bool = False
    required_result_entries: tuple[str, ...] = ("weights", "bias")

    def __init__(self, lr: float = 0.1, batch_size: int = 0,
                 collect_local_loss: bool = False):
        if not lr > 0:
            raise ValueError("lr must be > 0")
        self.lr = float(lr)
        self.batch_size = int(batch_size)  # <= 0 means full batch
        self.collect_local_loss = bool(collect_local_loss)

    def init_global(self, model: ModelParams) -> ParamBundle:
        bundle = ParamBundle()
        bundle.add("weights", model.weights, AggOp.WEIGHTED_AVERAGE)
        bundle.add("bias", model.bias, AggOp.WEIGHTED_AVERAGE)
        return bundle

    def default_state(self, model: ModelParams) -> dict[str, np.ndarray] | None:
        return None

    @abc.abstractmethod
    def local_gradient(self, model: ModelParams, xb: np.ndarray, yb: np.ndarray,
                       ctx: LocalContext):
        """Return (loss, grad_weights, grad_bias) on one minibatch."""

    @abc.abstractmethod
    def finalize(self, end_model: ModelParams, steps: int, ctx: LocalContext,
                 n_samples: int) -> tuple[ParamBundle, dict[str, np.ndarray] | None]:
        """Build the uploaded result bundle and the new state payload."""

    @abc.abstractmethod
    def server_update(self, old_global: ParamBundle,
                      agg: "AggregateResult") -> ParamBundle:
        """Apply this algorithm's server rule to the folded aggregate."""


class FedAvg(AlgorithmPlugin):
    """Weighted model averaging; the server adopts the average verbatim."""

    name = "fedavg"

    def local_gradient(self, model, xb, yb, ctx):
        return loss_and_grad(model, xb, yb)

    def finalize(self, end_model, steps, ctx, n_samples):
        bundle = ParamBundle()
        bundle.add("weights", end_model.weights, AggOp.WEIGHTED_AVERAGE, weight=n_samples)
        bundle.add("bias", end_model.bias, AggOp.WEIGHTED_AVERAGE, weight=n_samples)
        return bundle, None

    def server_update(self, old_global, agg):
        return old_global.replaced(weights=agg.bundle.tensor("weights"),
                                   bias=agg.bundle.tensor("bias"))


class FedProx(FedAvg):
    """FedAvg plus a proximal pull (mu/2)*||theta - theta_global||^2 in the
    local loss. mu = 0 recovers FedAvg exactly."""

    name = "fedprox"

    def __init__(self, mu: float = 0.01, **kw):
        super().__init__(**kw)
        if mu < 0:
            raise ValueError("mu must be >= 0")
        self.mu = float(mu)

    def local_gradient(self, model, xb, yb, ctx):
        loss, gw, gb = loss_and_grad(model, xb, yb)
        if self.mu != 0.0:
            dw = model.weights - ctx.start_model.weights
            db = model.bias - ctx.start_model.bias
            loss += 0.5 * self.mu * (float(np.sum(dw * dw)) + float(np.sum(db * db)))
            gw = gw + self.mu * dw
            gb = gb + self.mu * db
        return loss, gw, gb


class FedNova(FedAvg):
    """Uploads the step-normalized update direction plus a summed step-scale
    entry; the server rescales the averaged direction by the effective step
    count so clients with unequal local work do not bias the update."""

    name = "fednova"
    required_result_entries = ("direction_weights", "direction_bias", "step_scale")

    def finalize(self, end_model, steps, ctx, n_samples):
        scale = self.lr * steps
        bundle = ParamBundle()
        bundle.add("direction_weights",
                   (ctx.start_model.weights - end_model.weights) / scale,
                   AggOp.WEIGHTED_AVERAGE, weight=n_samples)
        bundle.add("direction_bias",
                   (ctx.start_model.bias - end_model.bias) / scale,
                   AggOp.WEIGHTED_AVERAGE, weight=n_samples)
        bundle.add("step_scale", np.array([n_samples * scale]), AggOp.SUM)
        return bundle, None

    def server_update(self, old_global, agg):
        eff = float(agg.bundle.tensor("step_scale")[0]) / agg.weights["direction_weights"]
        model = old_global.model()
        return old_global.replaced(
            weights=model.weights - eff * agg.bundle.tensor("direction_weights"),
            bias=model.bias - eff * agg.bundle.tensor("direction_bias"))


class Scaffold(AlgorithmPlugin):
    """Control-variate corrected local steps.

    Clients keep a control variate c_m (persistent state); the server keeps
    its own c inside the global bundle. Local steps follow
    y <- y - lr * (g(y) + c - c_m); after `steps` steps the client uploads the
    model delta (weighted average) and the control delta (simple average),
    and refreshes c_m via c_m - c + (x - y) / (steps * lr).
    """

    name = "scaffold"
    is_stateful = True
    required_result_entries = ("delta_weights", "delta_bias",
                               "ctrl_delta_weights", "ctrl_delta_bias")

    def __init__(self, client_fraction: float = 1.0, **kw):
        super().__init__(**kw)
        if not 0 < client_fraction <= 1:
            raise ValueError("client_fraction must be in (0, 1]")
        self.client_fraction = float(client_fraction)

    def init_global(self, model):
        bundle = super().init_global(model)
        bundle.add("server_ctrl_weights", np.zeros_like(model.weights), AggOp.SUM)
        bundle.add("server_ctrl_bias", np.zeros_like(model.bias), AggOp.SUM)
        return bundle

    def default_state(self, model):
        return {"ctrl_weights": np.zeros_like(model.weights),
                "ctrl_bias": np.zeros_like(model.bias)}

    def local_gradient(self, model, xb, yb, ctx):
        loss, gw, gb = loss_and_grad(model, xb, yb)
        gw = gw + (ctx.global_bundle.tensor("server_ctrl_weights") - ctx.state["ctrl_weights"])
        gb = gb + (ctx.global_bundle.tensor("server_ctrl_bias") - ctx.state["ctrl_bias"])
        return loss, gw, gb

    def finalize(self, end_model, steps, ctx, n_samples):
        x, y = ctx.start_model, end_model
        inv = 1.0 / (steps * self.lr)
        new_cw = ctx.state["ctrl_weights"] - ctx.global_bundle.tensor("server_ctrl_weights") \
            + (x.weights - y.weights) * inv
        new_cb = ctx.state["ctrl_bias"] - ctx.global_bundle.tensor("server_ctrl_bias") \
            + (x.bias - y.bias) * inv
        bundle = ParamBundle()
        bundle.add("delta_weights", y.weights - x.weights, AggOp.WEIGHTED_AVERAGE,
                   weight=n_samples)
        bundle.add("delta_bias", y.bias - x.bias, AggOp.WEIGHTED_AVERAGE, weight=n_samples)
        bundle.add("ctrl_delta_weights", new_cw - ctx.state["ctrl_weights"], AggOp.SIMPLE_AVERAGE)
        bundle.add("ctrl_delta_bias", new_cb - ctx.state["ctrl_bias"], AggOp.SIMPLE_AVERAGE)
        return bundle, {"ctrl_weights": new_cw, "ctrl_bias": new_cb}

    def server_update(self, old_global, agg):
        model = old_global.model()
        return old_global.replaced(
            weights=model.weights + agg.bundle.tensor("delta_weights"),
            bias=model.bias + agg.bundle.tensor("delta_bias"),
            server_ctrl_weights=old_global.tensor("server_ctrl_weights")
            + self.client_fraction * agg.bundle.tensor("ctrl_delta_weights"),
            server_ctrl_bias=old_global.tensor("server_ctrl_bias")
            + self.client_fraction * agg.bundle.tensor("ctrl_delta_bias"))


class FedDyn(AlgorithmPlugin):
    """Dynamic regularization: each client keeps a gradient-correction term
    h_m; the server keeps a running h and recenters the averaged model by
    -h/alpha every round."""

    name = "feddyn"
    is_stateful = True

    def __init__(self, alpha: float = 0.1, client_fraction: float = 1.0, **kw):
        super().__init__(**kw)
        if not alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 < client_fraction <= 1:
            raise ValueError("client_fraction must be in (0, 1]")
        self.alpha = float(alpha)
        self.client_fraction = float(client_fraction)

    def init_global(self, model):
        bundle = ParamBundle()
        bundle.add("weights", model.weights, AggOp.SIMPLE_AVERAGE)
        bundle.add("bias", model.bias, AggOp.SIMPLE_AVERAGE)
        bundle.add("server_h_weights", np.zeros_like(model.weights), AggOp.SUM)
        bundle.add("server_h_bias", np.zeros_like(model.bias), AggOp.SUM)
        return bundle

    def default_state(self, model):
        return {"grad_corr_weights": np.zeros_like(model.weights),
                "grad_corr_bias": np.zeros_like(model.bias)}

    def local_gradient(self, model, xb, yb, ctx):
        loss, gw, gb = loss_and_grad(model, xb, yb)
        gw = gw - ctx.state["grad_corr_weights"] \
            + self.alpha * (model.weights - ctx.start_model.weights)
        gb = gb - ctx.state["grad_corr_bias"] \
            + self.alpha * (model.bias - ctx.start_model.bias)
        return loss, gw, gb

    def finalize(self, end_model, steps, ctx, n_samples):
        x, y = ctx.start_model, end_model
        new_hw = ctx.state["grad_corr_weights"] - self.alpha * (y.weights - x.weights)
        new_hb = ctx.state["grad_corr_bias"] - self.alpha * (y.bias - x.bias)
        bundle = ParamBundle()
        bundle.add("weights", y.weights, AggOp.SIMPLE_AVERAGE)
        bundle.add("bias", y.bias, AggOp.SIMPLE_AVERAGE)
        return bundle, {"grad_corr_weights": new_hw, "grad_corr_bias": new_hb}

    def server_update(self, old_global, agg):
        x = old_global.model()
        avg_w = agg.bundle.tensor("weights")
        avg_b = agg.bundle.tensor("bias")
        new_hw = old_global.tensor("server_h_weights") \
            - self.alpha * self.client_fraction * (avg_w - x.weights)
        new_hb = old_global.tensor("server_h_bias") \
            - self.alpha * self.client_fraction * (avg_b - x.bias)
        return old_global.replaced(weights=avg_w - new_hw / self.alpha,
                                   bias=avg_b - new_hb / self.alpha,
                                   server_h_weights=new_hw, server_h_bias=new_hb)


# Mime is intentionally absent: it ships server optimizer state to clients,
# which needs a bundle channel for server-side momentum. A plugin adding such
# entries to init_global and reading them in local_gradient fits this
# interface without engine changes; left as an extension point.
PLUGINS: dict[str, type[AlgorithmPlugin]] = {
    cls.name: cls for cls in (FedAvg, FedProx, FedNova, Scaffold, FedDyn)
}


def make_plugin(name: str, **hyper) -> AlgorithmPlugin:
    try:
        cls = PLUGINS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown algorithm {name!r}; available: {sorted(PLUGINS)}") from None
    return cls(**hyper)


def client_execute(plugin: AlgorithmPlugin, client: ClientProfile,
                   global_bundle: ParamBundle, state: ClientState | None,
                   epochs: int, batch_size: int, lr: float,
                   seed: int, round_num: int) -> TrainReport:
    """Run E local epochs of minibatch SGD under the plugin's loss.

    Deterministic given (seed, client_id, round_num); measured_seconds is the
    actual compute time of this call.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    t0 = time.perf_counter()
    part = client.data_partition
    n = client.sample_count
    start = global_bundle.model()
    state_payload = state.payload if state is not None else None
    ctx = LocalContext(start_model=start, global_bundle=global_bundle,
                       state=state_payload, lr=lr, n_samples=n)
    rng = stream_rng(seed, STREAM_MINIBATCH, client.client_id, round_num)
    bs = n if batch_size <= 0 else min(batch_size, n)

    w = start.weights.copy()
    b = start.bias.copy()
    steps = 0
    loss_total = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, bs):
            batch = order[lo: lo + bs]
            model = ModelParams(w, b)
            loss, gw, gb = plugin.local_gradient(model, part.features[batch],
                                                 part.labels[batch], ctx)
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"client {client.client_id} round {round_num}: loss diverged")
            w = w - lr * gw
            b = b - lr * gb
            loss_total += loss
            steps += 1

    result, new_payload = plugin.finalize(ModelParams(w, b), steps, ctx, n)
    if plugin.collect_local_loss:
        result.add("local_loss", np.array([loss_total / steps]), AggOp.COLLECT,
                   client_id=client.client_id)
    new_state = None
    if new_payload is not None:
        new_state = ClientState(client_id=client.client_id, round_written=round_num,
                                payload=new_payload)
    measured = max(time.perf_counter() - t0, 1e-9)
    return TrainReport(client_result=result, new_state=new_state,
                       samples_processed=epochs * n, measured_seconds=measured)
