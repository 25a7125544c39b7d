"""Gradient training of the penalized objective.

Adam on minibatches of time steps (full batch below 512 steps), deterministic
given the seed: fixed shuffle streams, fixed per-epoch noise streams, fixed
reduction order.  Checkpoints capture parameters, Adam state, and the stream
position so a resumed run is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as mdl
from .autodiff import ArrayView, NonFiniteError, ParamVector, value_and_gradient
from .model import HyperParams, ModelConfig, ModelParameters
from .seeds import substream

CHECKPOINT_FORMAT_VERSION = 1
FULL_BATCH_LIMIT = 512
MINIBATCH_SIZE = 128
PLATEAU_WINDOW = 50
PLATEAU_TOL = 1e-4


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; records where training aborted."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hyper: HyperParams = field(default_factory=HyperParams)
    batch_size: int | None = None        # None: full batch up to FULL_BATCH_LIMIT
    epochs: int | None = None            # None: hyper.epochs
    seed: int | None = None              # None: hyper.seed
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def run_epochs(self) -> int:
        return self.hyper.epochs if self.epochs is None else self.epochs

    @property
    def run_seed(self) -> int:
        return self.hyper.seed if self.seed is None else self.seed


@dataclass
class TrainReport:
    loss_history: list[float]
    seconds: float
    converged: bool
    n_params: int
    epochs_completed: int
    final_params: ParamVector | None = None


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)

    def update(self, params: np.ndarray, grad: np.ndarray, lr: float,
               beta1: float, beta2: float, eps: float) -> np.ndarray:
        self.step += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad**2
        m_hat = self.m / (1.0 - beta1**self.step)
        v_hat = self.v / (1.0 - beta2**self.step)
        return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def _batches(n_t: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None:
        if n_t <= FULL_BATCH_LIMIT:
            yield np.arange(n_t)
            return
        batch_size = MINIBATCH_SIZE
    order = rng.permutation(n_t)
    for start in range(0, n_t, batch_size):
        yield np.sort(order[start : start + batch_size])


def _is_converged(history: list[float]) -> bool:
    if len(history) < PLATEAU_WINDOW:
        return False
    tail = np.asarray(history[-PLATEAU_WINDOW:])
    scale = max(abs(tail[-1]), 1e-12)
    return bool((tail.max() - tail.min()) / scale < PLATEAU_TOL)


def train(
    data: np.ndarray,
    c: np.ndarray,
    cfg: TrainConfig,
    *,
    knots: np.ndarray | None = None,
    sites: np.ndarray | None = None,
    wendland_radius: float | None = None,
    model_config: ModelConfig | None = None,
    resume_from: dict | str | None = None,
) -> tuple[ModelParameters, TrainReport]:
    """Maximize the penalized objective; returns the model and an epoch log.

    ``resume_from`` accepts a checkpoint (dict or path); training then
    continues from the recorded epoch with the saved Adam state and matches an
    uninterrupted run bit for bit.
    """
    x = np.asarray(data, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if x.ndim != 2 or np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("data must be a strictly positive (time, site) matrix")
    if c.shape != (x.shape[0],):
        raise ValueError("condition series length must match the data")
    n_t, n_s = x.shape

    if resume_from is not None:
        state = resume_from if isinstance(resume_from, dict) else checkpoint_read(resume_from)
        model, adam, start_epoch, history = _restore_training_state(state)
        cfg = replace(cfg, hyper=model.config.hyper)
        params = model.params
        model_cfg = model.config
    else:
        if model_config is not None:
            model_cfg = model_config
        else:
            fixed_w = None
            if cfg.hyper.fix_w:
                if sites is None or knots is None or wendland_radius is None:
                    raise ValueError("fix_w needs sites, knots, and a Wendland radius")
                from .fieldsim import wendland_basis

                fixed_w = wendland_basis(sites, knots, wendland_radius)
            model_cfg = ModelConfig(
                n_sites=n_s, hyper=cfg.hyper, knots=knots, sites=sites,
                wendland_radius=wendland_radius, fixed_w=fixed_w,
            )
        params = mdl.init_params(model_cfg, cfg.run_seed)
        adam = AdamState.zeros(params.size)
        start_epoch = 0
        history: list[float] = []

    if model_cfg.n_sites != n_s:
        raise ValueError("model was built for a different site count")

    seed = cfg.run_seed
    lr = model_cfg.hyper.learning_rate
    epochs = cfg.run_epochs
    t0 = time.perf_counter()

    for epoch in range(start_epoch, epochs):
        shuffle_rng = substream(seed, "shuffle", epoch)
        epoch_loss = 0.0
        for bi, batch in enumerate(_batches(n_t, cfg.batch_size, shuffle_rng)):
            eps = substream(seed, "eps", epoch, bi).standard_normal(
                (model_cfg.hyper.mc_draws, n_t, model_cfg.hyper.latent_dim))
            objective = mdl.make_objective(model_cfg, x, c, eps, batch=batch)

            def loss(p, _obj=objective, _n=len(batch)):
                return -_obj(p) / float(_n)

            try:
                value, grad = value_and_gradient(loss, params)
            except NonFiniteError as err:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {err}",
                    epoch=epoch, batch=bi,
                ) from err
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingError(
                    f"non-finite loss or gradient at epoch {epoch}, batch {bi}",
                    epoch=epoch, batch=bi,
                )
            epoch_loss += value * len(batch)
            params = params.replace(adam.update(params.data, grad, lr,
                                                cfg.beta1, cfg.beta2, cfg.adam_eps))
        history.append(epoch_loss / n_t)
        if (cfg.checkpoint_every and cfg.checkpoint_path
                and (epoch + 1) % cfg.checkpoint_every == 0):
            checkpoint_save(cfg.checkpoint_path,
                            ModelParameters(model_cfg, params),
                            adam=adam, epochs_completed=epoch + 1,
                            loss_history=history, seed=seed)

    seconds = time.perf_counter() - t0
    model = ModelParameters(config=model_cfg, params=params)
    report = TrainReport(
        loss_history=list(history),
        seconds=seconds,
        converged=_is_converged(history),
        n_params=params.size,
        epochs_completed=epochs,
        final_params=params,
    )
    if cfg.checkpoint_path and not cfg.checkpoint_every:
        checkpoint_save(cfg.checkpoint_path, model, adam=adam,
                        epochs_completed=epochs, loss_history=history, seed=seed)
    return model, report


def evaluate_loss(model: ModelParameters, data, c, seed, epoch: int = 0) -> float:
    """Mean negative penalized objective over all time steps, using the same
    noise stream as the given training epoch (full batch)."""
    x = np.asarray(data, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    cfg = model.config
    eps = substream(seed, "eps", epoch, 0).standard_normal(
        (cfg.hyper.mc_draws, x.shape[0], cfg.hyper.latent_dim))
    value = mdl.penalized_elbo(cfg, ArrayView(model.params), x, c, eps)
    return float(-value / x.shape[0])


# ---------------------------------------------------------------------------
# hyperparameter grid search
# ---------------------------------------------------------------------------

def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Override hyper fields (by name or 'hyper.name') or TrainConfig fields."""
    hyper_kwargs = {}
    train_kwargs = {}
    hyper_fields = set(HyperParams.__dataclass_fields__)
    train_fields = set(TrainConfig.__dataclass_fields__)
    for key, value in overrides.items():
        name = key.split(".", 1)[1] if key.startswith("hyper.") else key
        if name in hyper_fields:
            hyper_kwargs[name] = tuple(value) if name == "enc_widths" else value
        elif name in train_fields:
            train_kwargs[name] = value
        else:
            raise KeyError(f"unknown hyperparameter {key!r}")
    hyper = replace(cfg.hyper, **hyper_kwargs) if hyper_kwargs else cfg.hyper
    return replace(cfg, hyper=hyper, **train_kwargs)


def grid_search(
    data,
    c,
    base_cfg: TrainConfig,
    grid: list[dict],
    *,
    search_epochs: int | None = None,
    knots=None,
    sites=None,
    wendland_radius=None,
) -> tuple[TrainConfig, list[float]]:
    """Train every candidate, score by final mean negative objective, return
    the argmin (ties keep the earliest grid entry)."""
    if not grid:
        raise ValueError("grid must be nonempty")
    scores: list[float] = []
    configs: list[TrainConfig] = []
    for overrides in grid:
        cand = apply_overrides(base_cfg, overrides)
        if search_epochs is not None:
            cand = replace(cand, epochs=search_epochs)
        configs.append(cand)
        try:
            _, report = train(data, c, cand, knots=knots, sites=sites,
                              wendland_radius=wendland_radius)
            scores.append(report.loss_history[-1] if report.loss_history else np.inf)
        except TrainingError:
            scores.append(np.inf)
    if not np.any(np.isfinite(scores)):
        raise TrainingError("every grid candidate aborted")
    best = int(np.argmin(scores))
    winner = configs[best]
    if search_epochs is not None:
        winner = replace(winner, epochs=base_cfg.epochs)
    return winner, scores


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def _encode_array(arr: np.ndarray | None):
    if arr is None:
        return None
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")}


def _decode_array(blob) -> np.ndarray | None:
    if blob is None:
        return None
    try:
        raw = base64.b64decode(blob["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    except (ValueError, TypeError, KeyError) as err:
        raise CheckpointError(f"corrupt array payload: {err}") from err
    expect = int(np.prod(blob["shape"])) if blob["shape"] else 1
    if arr.size != expect:
        raise CheckpointError("array payload length does not match its shape")
    return arr.reshape(blob["shape"])


def checkpoint_state(model: ModelParameters, *, adam: AdamState | None = None,
                     epochs_completed: int = 0, loss_history=None,
                     seed: int | None = None) -> dict:
    cfg = model.config
    hyper = asdict(cfg.hyper)
    hyper["enc_widths"] = list(hyper["enc_widths"])
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hyper": hyper,
        "model": {
            "n_sites": cfg.n_sites,
            "knots": _encode_array(cfg.knots),
            "sites": _encode_array(cfg.sites),
            "wendland_radius": cfg.wendland_radius,
            "fixed_w": _encode_array(cfg.fixed_w),
            "phi": _encode_array(cfg.phi),
            "sever_condition": cfg.sever_condition,
        },
        "param_layout": [[name, offset, list(shape)]
                         for name, (offset, shape) in model.params.layout.items()],
        "params": _encode_array(model.params.data),
        "adam": None if adam is None else {
            "m": _encode_array(adam.m),
            "v": _encode_array(adam.v),
            "step": adam.step,
        },
        "rng": {"seed": seed, "epochs_completed": epochs_completed},
        "meta": {"loss_history": list(map(float, loss_history or [])),
                 "n_params": model.params.size},
    }


def checkpoint_save(path, model: ModelParameters, *, adam: AdamState | None = None,
                    epochs_completed: int = 0, loss_history=None,
                    seed: int | None = None) -> None:
    state = checkpoint_state(model, adam=adam, epochs_completed=epochs_completed,
                             loss_history=loss_history, seed=seed)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state, fh)


def checkpoint_read(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    version = state.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {version!r} does not match "
            f"{CHECKPOINT_FORMAT_VERSION}")
    return state


def checkpoint_load(path) -> ModelParameters:
    """Rebuild the model from a checkpoint; bit-exact parameter round trip."""
    state = checkpoint_read(path)
    return _model_from_state(state)


def _model_from_state(state: dict) -> ModelParameters:
    hyper_dict = dict(state["hyper"])
    hyper_dict["enc_widths"] = tuple(hyper_dict["enc_widths"])
    hyper = HyperParams(**hyper_dict)
    ms = state["model"]
    cfg = ModelConfig(
        n_sites=ms["n_sites"],
        hyper=hyper,
        knots=_decode_array(ms["knots"]),
        sites=_decode_array(ms["sites"]),
        wendland_radius=ms["wendland_radius"],
        fixed_w=_decode_array(ms["fixed_w"]),
        sever_condition=ms["sever_condition"],
        phi=_decode_array(ms["phi"]),
    )
    layout = {name: (offset, tuple(shape))
              for name, offset, shape in state["param_layout"]}
    data = _decode_array(state["params"])
    expected = mdl.count_params(cfg)
    if data is None or data.size != expected:
        raise CheckpointError("parameter payload does not match the model layout")
    return ModelParameters(config=cfg, params=ParamVector(data=data, layout=layout))


def _restore_training_state(state: dict):
    model = _model_from_state(state)
    blob = state.get("adam")
    if blob is None:
        adam = AdamState.zeros(model.params.size)
    else:
        adam = AdamState(m=_decode_array(blob["m"]), v=_decode_array(blob["v"]),
                         step=blob["step"])
    epochs_completed = state["rng"]["epochs_completed"]
    history = list(state["meta"].get("loss_history", []))
    return model, adam, epochs_completed, history
