"""The two alignment networks and their forward/backward passes.

``FastDHMNetwork``: one input stack (image + mean heat map) -> factorized
CNN -> fast recurrent cell unrolled T steps -> shared dense head reading
normalized landmark coordinates from every state.

``ClassicDHMNetwork``: T iterations of (regenerate heat map from the
current shape parameters -> plain CNN -> vanilla RNN step on the
parameters); landmarks come from projecting the final parameters.

Batched arrays throughout: images ``(N, H, W, 3)``, landmarks ``(N, 2, L)``.
Normalized coordinates are pixel coordinates divided by the image size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import serialization
from ..errors import ContractViolation, DataError
from ..heatmap import (build_input_stack, centered_pose, heatmap_from_posed, mean_initial_heatmap,
                       normalize_channel_vjp, normalize_shape, rasterize_heatmap,
                       rasterize_heatmap_vjp)
from ..morphable_model import (PITCH, POSE_DIM, ROLL, SCALE, TX, TY, YAW, MorphableModel,
                               PoseShapeParams, model_from_arrays, posed_shape, posed_shape_vjp)
from ..nn.cost import CostReport, DenseSpec, cost_of
from ..nn.kernels import ConvSpec
from ..nn.layers import Conv2D, Dense, Flatten, MaxPool, ReLU, Sequential, collect_parameters
from ..rnn import (FastRecurrentCell, VanillaRnnCell, fast_recurrent_init,
                   fast_recurrent_init_backward, unroll, unroll_fast_backward, vanilla_step,
                   vanilla_step_backward)
from .config import PipelineConfig

SCHEMA_VERSION = 1


@dataclass
class AlignmentResult:
    final_landmarks: np.ndarray                 # 2 x L pixels
    stage_landmarks: list                       # T entries, 2 x L pixels
    initial_landmarks: np.ndarray               # readout before the first step
    stage_seconds: list
    mult_adds: int
    param_trajectory: list | None = None        # classic: p_1 .. p_T
    heatmaps: list = field(default_factory=list)  # classic: heat map of each iteration
    input_images: list = field(default_factory=list)


class _Network:
    config: PipelineConfig
    kind: str

    def named_layers(self):
        raise NotImplementedError

    def parameters(self):
        return collect_parameters(self.named_layers())

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def trainable(self):
        return self.parameters()

    def extra_arrays(self) -> dict:
        return {}

    def save(self, path, dtype="f64") -> int:
        params, _ = self.parameters()
        arrays = {**params, **self.extra_arrays()}
        meta = {"kind": self.kind, "config": self.config.to_dict(), "schema_version": SCHEMA_VERSION}
        return serialization.save(path, arrays, meta, dtype)

    def serialized_size(self, dtype="f32") -> int:
        params, _ = self.parameters()
        meta = {"kind": self.kind, "config": self.config.to_dict(), "schema_version": SCHEMA_VERSION}
        return len(serialization.dumps({**params, **self.extra_arrays()}, meta, dtype))

    def load_arrays(self, arrays):
        params, _ = self.parameters()
        for name, arr in params.items():
            if name not in arrays:
                raise DataError(f"model file lacks weights {name!r}")
            if arrays[name].shape != arr.shape:
                raise DataError(f"weights {name!r} have shape {arrays[name].shape}, expected {arr.shape}")
            arr[...] = arrays[name]

    def layer_costs(self) -> list[tuple[str, object, object]]:
        """``(layer name, spec, output size)`` for every conv/dense application in one forward."""
        raise NotImplementedError

    def cost(self) -> CostReport:
        total = CostReport(0, 0)
        for _, spec, size in self.layer_costs():
            total = total + CostReport(cost_of(spec, size).mult_adds, 0)
        params = sum(cost_of(layer.spec).parameters for _, layer in self.named_leaf_layers())
        return CostReport(total.mult_adds, params)

    def named_leaf_layers(self):
        out = []
        for prefix, layer in self.named_layers():
            if isinstance(layer, Sequential):
                out += [(n, l) for n, l in layer.named_layers(prefix) if hasattr(l, "spec")]
            elif isinstance(layer, FastRecurrentCell):
                out += [(f"{prefix}.d_in", _SpecOnly(layer.dw_spec)),
                        (f"{prefix}.w_hh", _SpecOnly(layer.pw_spec)),
                        (f"{prefix}.d_hidden", _SpecOnly(layer.dw_spec)),
                        (f"{prefix}.init", _SpecOnly(layer.pw_spec))]
            elif isinstance(layer, VanillaRnnCell):
                out += [(f"{prefix}.w_ih", _SpecOnly(DenseSpec(layer.feature_dim, layer.hidden_dim))),
                        (f"{prefix}.w_hh", _SpecOnly(DenseSpec(layer.hidden_dim, layer.hidden_dim))),
                        (f"{prefix}.w_ho", _SpecOnly(DenseSpec(layer.hidden_dim, layer.output_dim)))]
            elif hasattr(layer, "spec"):
                out.append((prefix, layer))
        return out


@dataclass
class _SpecOnly:
    spec: object


# ---------------------------------------------------------------------------
# fast variant


def build_fast_cnn(config: PipelineConfig, rng) -> Sequential:
    c = config.stem_channels * config.width_multiplier
    layers = [Conv2D(ConvSpec(3, 6, c, 2, None, "standard"), rng), ReLU()]
    for block in range(1, config.cnn_block_count + 1):
        stride = 2 if block in config.strided_blocks else 1
        out = 2 * c if stride == 2 else c
        layers += [Conv2D(ConvSpec(3, c, c, stride, None, "depthwise"), rng), ReLU(),
                   Conv2D(ConvSpec(1, c, out, 1, 0, "pointwise"), rng), ReLU()]
        c = out
    return Sequential(layers)


class FastDHMNetwork(_Network):
    kind = "fast_dhm"

    def __init__(self, config: PipelineConfig, mean_heatmap: np.ndarray, mean_landmarks: np.ndarray,
                 seed: int = 0):
        if config.variant != "fast_dhm":
            raise ContractViolation("FastDHMNetwork needs a fast_dhm config")
        self.config = config
        rng = np.random.default_rng(seed)
        size = config.image_size
        self.mean_heatmap = np.asarray(mean_heatmap, dtype=np.float64)
        if self.mean_heatmap.shape != (size, size, 3):
            raise ContractViolation(f"mean heat map must be {size}x{size}x3")
        self.mean_landmarks = np.asarray(mean_landmarks, dtype=np.float64).reshape(2, -1)
        self.landmark_count = self.mean_landmarks.shape[1]
        self.cnn = build_fast_cnn(config, rng)
        self.feature_shape = self.cnn.output_shape((size, size, 6))
        self.cell = FastRecurrentCell(self.feature_shape[2], config.recurrent_kernel, rng)
        self.flatten = Flatten()
        self.head = Dense(int(np.prod(self.feature_shape)), 2 * self.landmark_count, rng, scale=0.05)
        self.head.params["bias"][:] = (self.mean_landmarks / size).ravel()

    @classmethod
    def from_model(cls, config: PipelineConfig, model: MorphableModel, seed: int = 0):
        pose = centered_pose(model, config.resolution, config.face_fill)
        hm = mean_initial_heatmap(model, pose, config.resolution, config.sigma)
        return cls(config, hm.data, posed_shape(model, pose)[:2], seed)

    def named_layers(self):
        return [("cnn", self.cnn), ("cell", self.cell), ("head", self.head)]

    def extra_arrays(self):
        return {"mean_heatmap": self.mean_heatmap, "mean_landmarks": self.mean_landmarks}

    def input_stack(self, images):
        images = np.asarray(images, dtype=np.float64)
        hm = np.broadcast_to(self.mean_heatmap, images.shape)
        return np.concatenate([images, hm], axis=-1)

    def forward_batch(self, images):
        """Returns normalized readouts for states 0..T, each ``(N, 2L)``, plus a cache."""
        stack = self.input_stack(images)
        feats, cnn_cache = self.cnn.forward(stack)
        f0, h0 = fast_recurrent_init(self.cell, feats)
        run = unroll(self.cell, (f0, h0), self.config.steps)
        maps = [f0] + [s[0] for s in run.states]
        outputs, head_caches = [], []
        for fmap in maps:
            flat, fcache = self.flatten.forward(fmap)
            y, hcache = self.head.forward(flat)
            outputs.append(y)
            head_caches.append((fcache, hcache))
        return outputs, (feats, cnn_cache, run, head_caches)

    def backward_batch(self, grad_outputs, cache):
        """``grad_outputs[t]`` is d loss / d readout t (or ``None``)."""
        feats, cnn_cache, run, head_caches = cache
        grad_maps = []
        for g, (fcache, hcache) in zip(grad_outputs, head_caches):
            if g is None:
                grad_maps.append(None)
                continue
            grad_maps.append(self.flatten.backward(self.head.backward(g, hcache), fcache))
        gf0, gh0 = unroll_fast_backward(self.cell, run, grad_maps[1:])
        if grad_maps[0] is not None:
            gf0 = gf0 + grad_maps[0]
        gfeats = fast_recurrent_init_backward(self.cell, feats, gf0, gh0)
        self.cnn.backward(gfeats, cnn_cache)

    def predict_stages(self, images) -> np.ndarray:
        """``(T+1, N, 2, L)`` pixel landmarks for every readout."""
        outputs, _ = self.forward_batch(images)
        size = self.config.image_size
        return np.stack([y.reshape(-1, 2, self.landmark_count) * size for y in outputs])

    def layer_costs(self):
        size = self.config.image_size
        rows, shape = [], (size, size, 6)
        for name, layer in self.cnn.named_layers("cnn"):
            for spec, out in layer.costs(shape):
                rows.append((name, spec, out))
            shape = layer.output_shape(shape)
        hw = self.feature_shape[:2]
        rows.append(("cell.init", self.cell.pw_spec, hw))
        for t in range(1, self.config.steps + 1):
            rows += [(f"cell.step{t}.d_in", self.cell.dw_spec, hw),
                     (f"cell.step{t}.w_hh", self.cell.pw_spec, hw),
                     (f"cell.step{t}.d_hidden", self.cell.dw_spec, hw)]
        for t in range(self.config.steps + 1):
            rows.append((f"head.readout{t}", self.head.spec, 1))
        return rows

    def cnn_parameter_count(self) -> int:
        return sum(cost_of(layer.spec).parameters for _, layer in self.cnn.named_layers("cnn")
                   if hasattr(layer, "spec"))


def fast_forward(network: FastDHMNetwork, image, mean_map=None, config=None) -> AlignmentResult:
    """Align one ``H x W x 3`` image with the fast pipeline."""
    config = config or network.config
    if mean_map is not None:
        hm = mean_map.data if hasattr(mean_map, "data") else np.asarray(mean_map)
        if not np.array_equal(hm, network.mean_heatmap):
            network = _with_mean_map(network, hm)
    image = np.asarray(image, dtype=np.float64)
    t0 = time.perf_counter()
    stack = network.input_stack(image[None])
    feats, _ = network.cnn.forward(stack)
    f, h = fast_recurrent_init(network.cell, feats)
    size, L = config.image_size, network.landmark_count

    def readout(fmap):
        y, _ = network.head.forward(network.flatten.forward(fmap)[0])
        return y.reshape(2, L) * size

    initial = readout(f)
    stages, seconds = [], []
    t_prev = time.perf_counter()
    for _ in range(config.steps):
        run = unroll(network.cell, (f, h), 1)
        f, h = run.states[-1]
        stages.append(readout(f))
        now = time.perf_counter()
        seconds.append(now - t_prev)
        t_prev = now
    seconds[0] += t_prev - t0 - sum(seconds)
    mult_adds = sum(cost_of(spec, sz).mult_adds for _, spec, sz in network.layer_costs())
    return AlignmentResult(stages[-1], stages, initial, seconds, mult_adds)


def _with_mean_map(network, hm):
    clone = FastDHMNetwork(network.config, hm, network.mean_landmarks)
    params, _ = network.parameters()
    clone.load_arrays(params)
    return clone


# ---------------------------------------------------------------------------
# classic variant


def build_classic_cnn(config: PipelineConfig, rng) -> Sequential:
    layers, c = [], 6
    for out in config.classic_channels:
        layers += [Conv2D(ConvSpec(3, c, out, 1, None, "standard"), rng), ReLU(), MaxPool(2)]
        c = out
    layers.append(Flatten())
    return Sequential(layers)


class ClassicDHMNetwork(_Network):
    """Evolves whitened shape parameters ``q`` with ``p = p_ref + scale * q``.

    Ablation ``no_heatmap_2d_rnn`` evolves 3L landmark offsets instead and
    feeds a fixed map of the initial 2D landmarks; ``no_recurrence_3d_cnn``
    runs one feed-forward step with the recurrent weights held at zero.
    """

    kind = "classic_dhm"

    def __init__(self, config: PipelineConfig, model: MorphableModel, seed: int = 0):
        if config.variant != "classic_dhm":
            raise ContractViolation("ClassicDHMNetwork needs a classic_dhm config")
        self.config = config
        self.model = model
        self.landmark_count = model.landmark_count
        rng = np.random.default_rng(seed)
        size = config.image_size
        self.cnn = build_classic_cnn(config, rng)
        feature_dim = self.cnn.output_shape((size, size, 6))[0]
        self.ref_pose = centered_pose(model, config.resolution, config.face_fill)
        self.p_ref = self.ref_pose.to_vector()
        self.scale_vec = self._scale_vector()
        self.ablation = config.ablation
        if self.ablation == "no_heatmap_2d_rnn":
            state_dim = 3 * model.landmark_count
            self.init_posed = posed_shape(model, self.ref_pose)
            values = normalize_shape(self.init_posed)
            values[2] = 0.0
            self.fixed_map = rasterize_heatmap(self.init_posed[:2], values, config.resolution, config.sigma).data
        else:
            state_dim = model.param_dim
        self.steps = 1 if self.ablation == "no_recurrence_3d_cnn" else config.steps
        self.cell = VanillaRnnCell(feature_dim, config.hidden_dim, state_dim, rng,
                                   use_next_hidden=config.use_next_hidden or self.ablation == "no_recurrence_3d_cnn")
        if self.ablation == "no_recurrence_3d_cnn":
            self.cell.params["w_hh"][:] = 0.0

    def _scale_vector(self):
        s = self.config.param_scale
        size = self.config.image_size
        vec = np.full(self.model.param_dim, float(s["coef"]))
        vec[SCALE] = s["scale"] * self.ref_pose.scale_f
        vec[PITCH], vec[YAW], vec[ROLL] = s["pitch"], s["yaw"], s["roll"]
        vec[TX] = vec[TY] = s["translation"] * size
        return vec

    def named_layers(self):
        return [("cnn", self.cnn), ("cell", self.cell)]

    def trainable(self):
        params, grads = self.parameters()
        if self.ablation == "no_recurrence_3d_cnn":
            for name in ("cell.w_hh", "cell.h0"):
                params.pop(name)
                grads.pop(name)
        return params, grads

    def extra_arrays(self):
        return {f"model/{k}": v for k, v in self.model.arrays().items()}

    # -- state decoding ------------------------------------------------------

    def params_of(self, q) -> PoseShapeParams:
        return PoseShapeParams.from_vector(self.p_ref + self.scale_vec * q, self.model.k_id, self.model.k_exp)

    def posed_of(self, q) -> np.ndarray:
        """Posed 3 x L shape in pixels for one state vector."""
        if self.ablation == "no_heatmap_2d_rnn":
            return self.init_posed + q.reshape(3, -1) * self.config.image_size
        return posed_shape(self.model, self.params_of(q))

    def posed_vjp(self, q, grad_posed) -> np.ndarray:
        if self.ablation == "no_heatmap_2d_rnn":
            g = np.zeros((3, self.landmark_count))
            g[:grad_posed.shape[0]] = grad_posed
            return g.ravel() * self.config.image_size
        return posed_shape_vjp(self.model, self.params_of(q), grad_posed) * self.scale_vec

    def heatmap_of(self, posed) -> np.ndarray:
        if self.ablation == "no_heatmap_2d_rnn":
            return self.fixed_map
        return heatmap_from_posed(posed, self.config.resolution, self.config.sigma).data

    # -- passes ----------------------------------------------------------------

    def forward_batch(self, images, q0=None):
        images = np.asarray(images, dtype=np.float64)
        n = images.shape[0]
        size = self.config.image_size
        q = np.zeros((n, self.cell.output_dim)) if q0 is None else np.array(q0, dtype=np.float64)
        h = self.cell.initial_hidden(n) if self.ablation != "no_recurrence_3d_cnn" \
            else np.zeros((n, self.cell.hidden_dim))
        posed = [self.posed_of(qi) for qi in q]
        outputs = [np.stack([p[:2].ravel() for p in posed]) / size]
        steps, maps = [], []
        for _ in range(self.steps):
            hms = np.stack([self.heatmap_of(p) for p in posed])
            maps.append(hms)
            stack = np.concatenate([images, hms], axis=-1)
            feats, cnn_cache = self.cnn.forward(stack)
            q_prev, posed_prev = q, posed
            h, q, cell_cache = vanilla_step(self.cell, feats, h, q)
            posed = [self.posed_of(qi) for qi in q]
            outputs.append(np.stack([p[:2].ravel() for p in posed]) / size)
            steps.append((q_prev, posed_prev, cnn_cache, cell_cache))
        return outputs, {"steps": steps, "final_q": q, "maps": maps}

    def backward_batch(self, grad_outputs, cache):
        size = self.config.image_size
        L = self.landmark_count
        steps = cache["steps"]

        def readout_grad(t, q_batch):
            g = grad_outputs[t]
            if g is None:
                return 0.0
            return np.stack([self.posed_vjp(qi, gi.reshape(2, L) / size) for qi, gi in zip(q_batch, g)])

        gq = readout_grad(len(steps), cache["final_q"])
        gh = np.zeros((np.shape(cache["final_q"])[0], self.cell.hidden_dim))
        for t in reversed(range(len(steps))):
            q_prev, posed_prev, cnn_cache, cell_cache = steps[t]
            gq = gq + np.zeros_like(q_prev)
            gfeat, gh, gq = vanilla_step_backward(self.cell, cell_cache, gh, gq)
            gstack = self.cnn.backward(gfeat, cnn_cache)
            if self.config.heatmap_grad and self.ablation == "none":
                gq = gq + np.stack([self._heatmap_vjp(qi, pi, gs[..., 3:])
                                    for qi, pi, gs in zip(q_prev, posed_prev, gstack)])
            if t > 0:
                gq = gq + readout_grad(t, q_prev)
        if self.ablation != "no_recurrence_3d_cnn":
            self.cell.initial_hidden_backward(gh)

    def _heatmap_vjp(self, q, posed, grad_map):
        values = normalize_shape(posed)
        g_locs, g_vals = rasterize_heatmap_vjp(posed[:2], values, self.config.resolution,
                                               self.config.sigma, grad_map)
        g_posed = np.vstack([normalize_channel_vjp(posed[j], g_vals[j]) for j in range(3)])
        g_posed[:2] += g_locs
        return self.posed_vjp(q, g_posed)

    def predict_stages(self, images) -> np.ndarray:
        outputs, _ = self.forward_batch(images)
        size = self.config.image_size
        return np.stack([y.reshape(-1, 2, self.landmark_count) * size for y in outputs])

    def layer_costs(self):
        size = self.config.image_size
        rows = []
        for t in range(1, self.steps + 1):
            shape = (size, size, 6)
            for name, layer in self.cnn.named_layers("cnn"):
                for spec, out in layer.costs(shape):
                    rows.append((f"iter{t}.{name}", spec, out))
                shape = layer.output_shape(shape)
            c = self.cell
            rows += [(f"iter{t}.cell.w_ih", DenseSpec(c.feature_dim, c.hidden_dim), 1),
                     (f"iter{t}.cell.w_hh", DenseSpec(c.hidden_dim, c.hidden_dim), 1),
                     (f"iter{t}.cell.w_ho", DenseSpec(c.hidden_dim, c.output_dim), 1)]
        return rows


def classic_forward(network: ClassicDHMNetwork, image, p_0: PoseShapeParams | None = None,
                    config: PipelineConfig | None = None) -> AlignmentResult:
    """Align one image, regenerating the heat map from the current parameters each iteration."""
    config = config or network.config
    image = np.asarray(image, dtype=np.float64)
    size = config.image_size
    if p_0 is None or network.ablation == "no_heatmap_2d_rnn":
        q = np.zeros(network.cell.output_dim)
    else:
        q = (p_0.to_vector() - network.p_ref) / network.scale_vec
    h = network.cell.initial_hidden() if network.ablation != "no_recurrence_3d_cnn" \
        else np.zeros(network.cell.hidden_dim)
    posed = network.posed_of(q)
    initial = posed[:2].copy()
    stages, seconds, traj, maps, inputs = [], [], [], [], []
    for _ in range(network.steps):
        t0 = time.perf_counter()
        hm = network.heatmap_of(posed)
        maps.append(hm.copy())
        inputs.append(image.copy())
        stack = np.concatenate([image, hm], axis=-1)[None]
        feats, _ = network.cnn.forward(stack)
        h, q, _ = vanilla_step(network.cell, feats[0], h, q)
        posed = network.posed_of(q)
        stages.append(posed[:2].copy())
        traj.append(network.p_ref + network.scale_vec * q if network.ablation != "no_heatmap_2d_rnn" else q.copy())
        seconds.append(time.perf_counter() - t0)
    mult_adds = sum(cost_of(spec, sz).mult_adds for _, spec, sz in network.layer_costs())
    return AlignmentResult(stages[-1], stages, initial, seconds, mult_adds, traj, maps, inputs)


# ---------------------------------------------------------------------------
# stub predictor and persistence


class MeanShapePredictor(_Network):
    """Always predicts the mean landmarks; a baseline and a test stub."""

    kind = "mean_shape"

    def __init__(self, config: PipelineConfig, mean_landmarks: np.ndarray):
        self.config = config
        self.mean_landmarks = np.asarray(mean_landmarks, dtype=np.float64).reshape(2, -1)
        self.landmark_count = self.mean_landmarks.shape[1]

    @classmethod
    def from_model(cls, config, model):
        pose = centered_pose(model, config.resolution, config.face_fill)
        return cls(config, posed_shape(model, pose)[:2])

    def named_layers(self):
        return []

    def extra_arrays(self):
        return {"mean_landmarks": self.mean_landmarks}

    def predict_stages(self, images):
        n = np.shape(images)[0]
        return np.broadcast_to(self.mean_landmarks, (1, n, 2, self.landmark_count)).copy()

    def layer_costs(self):
        return []


def build_network(config: PipelineConfig, model: MorphableModel, seed: int = 0):
    if config.variant == "fast_dhm":
        return FastDHMNetwork.from_model(config, model, seed)
    return ClassicDHMNetwork(config, model, seed)


def load_network(path):
    arrays, meta = serialization.load(path)
    kind = meta.get("kind")
    try:
        config = PipelineConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ContractViolation) as exc:
        raise DataError(f"{path}: missing or invalid config in model metadata ({exc})") from exc
    if kind == "fast_dhm":
        net = FastDHMNetwork(config, arrays["mean_heatmap"], arrays["mean_landmarks"])
    elif kind == "classic_dhm":
        net = ClassicDHMNetwork(config, model_from_arrays(arrays, prefix="model/"))
    elif kind == "mean_shape":
        return MeanShapePredictor(config, arrays["mean_landmarks"])
    else:
        raise DataError(f"{path}: unknown model kind {kind!r}")
    net.load_arrays(arrays)
    return net
