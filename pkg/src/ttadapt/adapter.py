"""Globally shared low-rank adapters over a frozen transformer's linear maps.

One tensor train parameterizes the additive corrections for every adapted
site at once, indexed by structural axes:

    tt4d    modes (d_in, L, M, d_out)          sites (layer, module)
    tt5d    modes (d_in, L, M, H, d_out/H)     sites (layer, module), heads
            concatenated into the output columns
    tt4p1d  modes (d_in, L, T, M, d_out)       sites (layer, module, task)
    lora    independent (A, B) pairs per site  (baseline)

A site's correction is the chain of core slices with the boundary modes
left open; the adapted forward pass applies it to activations left to
right and never materializes the d_in x d_out matrix. ``alpha`` scales the
correction when it is added to the frozen output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tt as tt_mod
from .tt import TensorTrain

VARIANTS = ("tt4d", "tt5d", "tt4p1d", "lora")
MODULE_NAMES = ("q", "k", "v", "o")
INIT_TAGS = ("ze", "id", "no")
MAX_BOND_RANK = 4096
NORMAL_INIT_STD = 0.2
LORA_A_STD = 0.02


class AdapterSpecError(ValueError):
    """AdapterSpec fields are mutually inconsistent."""


def _default_strategy(n_cores: int) -> str:
    return "-".join(["ze"] + ["id"] * (n_cores - 1))


@dataclass(frozen=True)
class AdapterSpec:
    """Which adapter to build: variant, structural axes, ranks, scaling, init.

    ``bond_ranks`` may be a single int (uniform) or one rank per bond.
    ``init_strategy`` is a hyphen-joined tag string, one tag per core, from
    ze (zero core), id (identity slices; leading diagonal when ranks
    differ), no (i.i.d. normal, std 0.2). At least one core must be ze so
    the adapter output starts at exactly zero.
    """

    variant: str
    d_in: int
    d_out: int
    num_layers: int
    target_modules: tuple = ("q", "v")
    bond_ranks: object = 8
    alpha: float = 1.0
    num_heads: int = 0
    num_tasks: int = 0
    init_strategy: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise AdapterSpecError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.d_in < 1 or self.d_out < 1 or self.num_layers < 1:
            raise AdapterSpecError("d_in, d_out and num_layers must be positive")
        mods = tuple(str(m).lower() for m in self.target_modules)
        if not mods or len(set(mods)) != len(mods) or any(m not in MODULE_NAMES for m in mods):
            raise AdapterSpecError(
                f"target_modules must be a non-repeating subset of {MODULE_NAMES}, got {self.target_modules}"
            )
        object.__setattr__(self, "target_modules", mods)
        if self.alpha <= 0:
            raise AdapterSpecError(f"alpha must be positive, got {self.alpha}")
        if self.variant == "tt5d":
            if self.num_heads < 1:
                raise AdapterSpecError("tt5d requires num_heads")
            if self.d_out % self.num_heads != 0:
                raise AdapterSpecError(f"num_heads {self.num_heads} must divide d_out {self.d_out}")
        if self.variant == "tt4p1d" and self.num_tasks < 1:
            raise AdapterSpecError("tt4p1d requires num_tasks")

        ranks = self.bond_ranks
        if self.variant == "lora":
            r = int(ranks) if np.isscalar(ranks) else int(tuple(ranks)[0])
            if r < 1 or r > MAX_BOND_RANK:
                raise AdapterSpecError(f"lora rank must be in [1, {MAX_BOND_RANK}], got {r}")
            object.__setattr__(self, "bond_ranks", (r,))
        else:
            n_bonds = len(self.mode_sizes) - 1
            if np.isscalar(ranks):
                ranks = (int(ranks),) * n_bonds
            else:
                ranks = tuple(int(r) for r in ranks)
            if len(ranks) != n_bonds:
                raise AdapterSpecError(f"{self.variant} needs {n_bonds} bond ranks, got {len(ranks)}")
            if any(r < 1 or r > MAX_BOND_RANK for r in ranks):
                raise AdapterSpecError(f"bond ranks must be in [1, {MAX_BOND_RANK}], got {ranks}")
            object.__setattr__(self, "bond_ranks", ranks)

            strategy = self.init_strategy or _default_strategy(len(self.mode_sizes))
            tags = tuple(strategy.split("-"))
            if len(tags) != len(self.mode_sizes) or any(t not in INIT_TAGS for t in tags):
                raise AdapterSpecError(
                    f"init strategy {strategy!r} needs {len(self.mode_sizes)} tags from {INIT_TAGS}"
                )
            if "ze" not in tags:
                raise AdapterSpecError(f"init strategy {strategy!r} has no ze core; adapter output would not start at zero")
            object.__setattr__(self, "init_strategy", strategy)

    @property
    def num_modules(self) -> int:
        return len(self.target_modules)

    @property
    def mode_sizes(self) -> tuple:
        m = self.num_modules
        if self.variant == "tt4d":
            return (self.d_in, self.num_layers, m, self.d_out)
        if self.variant == "tt5d":
            return (self.d_in, self.num_layers, m, self.num_heads, self.d_out // self.num_heads)
        if self.variant == "tt4p1d":
            return (self.d_in, self.num_layers, self.num_tasks, m, self.d_out)
        raise AdapterSpecError("lora has no tensor-train modes")

    @property
    def init_tags(self) -> tuple:
        return tuple(self.init_strategy.split("-")) if self.init_strategy else ()

    def core_labels(self) -> tuple:
        if self.variant == "tt4d":
            return ("in", "layer", "module", "out")
        if self.variant == "tt5d":
            return ("in", "layer", "module", "head", "out")
        if self.variant == "tt4p1d":
            return ("in", "layer", "task", "module", "out")
        return ("lora_a", "lora_b")

    def module_index(self, name: str) -> int:
        try:
            return self.target_modules.index(name)
        except ValueError:
            raise KeyError(f"module {name!r} is not adapted (targets: {self.target_modules})") from None


class MetaTTAdapter:
    """A spec plus its trainable tensors.

    For tensor-train variants the state is one TensorTrain whose mode
    sizes match the variant's ordering exactly; for the lora baseline it is a
    stacked pair of arrays A (L, M, d_in, r) and B (L, M, r, d_out).
    Cores are mutated in place by the optimizer.
    """

    def __init__(self, spec: AdapterSpec, train: TensorTrain = None, lora_a=None, lora_b=None):
        self.spec = spec
        if spec.variant == "lora":
            if train is not None or lora_a is None or lora_b is None:
                raise AdapterSpecError("lora adapter takes lora_a and lora_b, not a train")
            r = spec.bond_ranks[0]
            want_a = (spec.num_layers, spec.num_modules, spec.d_in, r)
            want_b = (spec.num_layers, spec.num_modules, r, spec.d_out)
            self.lora_a = np.array(lora_a, dtype=np.float64, order="C")
            self.lora_b = np.array(lora_b, dtype=np.float64, order="C")
            if self.lora_a.shape != want_a or self.lora_b.shape != want_b:
                raise AdapterSpecError(
                    f"lora shapes {self.lora_a.shape}/{self.lora_b.shape} do not match {want_a}/{want_b}"
                )
            self.train = None
        else:
            if train is None:
                raise AdapterSpecError(f"{spec.variant} adapter requires a tensor train")
            if train.mode_sizes != spec.mode_sizes:
                raise AdapterSpecError(
                    f"train mode sizes {train.mode_sizes} do not match spec ordering {spec.mode_sizes}"
                )
            self.train = train
            self.lora_a = self.lora_b = None

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    def params(self) -> list:
        """Trainable arrays, in a stable order; mutated in place by training."""
        if self.spec.variant == "lora":
            return [self.lora_a, self.lora_b]
        return list(self.train.cores)

    def grads_like(self) -> list:
        return [np.zeros_like(p) for p in self.params()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    # -- boundary core matrix views ------------------------------------

    def _first(self) -> np.ndarray:
        return self.train.cores[0][0, :, :]  # (d_in, r1)

    def _last(self) -> np.ndarray:
        return self.train.cores[-1][:, :, 0]  # (r_last, last mode)

    def _check_site(self, l, m, t):
        spec = self.spec
        if not 0 <= l < spec.num_layers:
            raise IndexError(f"layer index {l} out of range [0, {spec.num_layers})")
        if not 0 <= m < spec.num_modules:
            raise IndexError(f"module index {m} out of range [0, {spec.num_modules})")
        if spec.variant == "tt4p1d":
            if t is None:
                raise IndexError("tt4p1d site needs a task index")
            if not 0 <= t < spec.num_tasks:
                raise IndexError(f"task index {t} out of range [0, {spec.num_tasks})")
        elif t is not None:
            raise IndexError(f"{spec.variant} has no task axis")

    def _interior_slices(self, l, m, t) -> list:
        """Interior slice matrices for a site, in chain order (5d: through the module core)."""
        cores = self.train.cores
        if self.spec.variant == "tt4d":
            return [cores[1][:, l, :], cores[2][:, m, :]]
        if self.spec.variant == "tt4p1d":
            return [cores[1][:, l, :], cores[2][:, t, :], cores[3][:, m, :]]
        return [cores[1][:, l, :], cores[2][:, m, :]]  # tt5d; head core handled separately

    # -- forward -------------------------------------------------------

    def site_forward(self, x: np.ndarray, l: int, m: int, t: int = None):
        """Unscaled correction output for one site, plus the activation cache.

        x is (N, d_in); the result is (N, d_out). The cache holds every
        intermediate activation the reverse pass needs.
        """
        self._check_site(l, m, t)
        spec = self.spec
        if spec.variant == "lora":
            a = self.lora_a[l, m]
            b = self.lora_b[l, m]
            xa = x @ a
            return xa @ b, ("lora", l, m, x, xa)
        hs = [x, x @ self._first()]
        for mat in self._interior_slices(l, m, t):
            hs.append(hs[-1] @ mat)
        if spec.variant == "tt5d":
            head_core = self.train.cores[3]
            last = self._last()  # (r4, d_out/H)
            us, blocks = [], []
            for h in range(spec.num_heads):
                u = hs[-1] @ head_core[:, h, :]
                us.append(u)
                blocks.append(u @ last)
            out = np.concatenate(blocks, axis=1)
            return out, ("tt5d", l, m, t, hs, us)
        out = hs[-1] @ self._last()
        return out, (spec.variant, l, m, t, hs, None)

    def site_backward(self, cache, d_out: np.ndarray, grads: list) -> np.ndarray:
        """Reverse pass of site_forward w.r.t. the *scaled* site output.

        d_out is the loss gradient at alpha * correction; core gradients
        accumulate into ``grads`` (parallel to params()) and the return
        value is this site's contribution to the input gradient.
        """
        g = self.alpha * d_out
        if cache[0] == "lora":
            _, l, m, x, xa = cache
            grads[1][l, m] += xa.T @ g
            d_xa = g @ self.lora_b[l, m].T
            grads[0][l, m] += x.T @ d_xa
            return d_xa @ self.lora_a[l, m].T

        variant, l, m, t, hs, us = cache
        cores = self.train.cores
        if variant == "tt5d":
            spec = self.spec
            dh = spec.d_out // spec.num_heads
            last = self._last()
            d_h = np.zeros_like(hs[-1])
            for h in range(spec.num_heads):
                d_block = g[:, h * dh:(h + 1) * dh]
                grads[4][:, :, 0] += us[h].T @ d_block
                d_u = d_block @ last.T
                grads[3][:, h, :] += hs[-1].T @ d_u
                d_h += d_u @ cores[3][:, h, :].T
            g = d_h
            interior = [(1, l), (2, m)]
        elif variant == "tt4p1d":
            grads[4][:, :, 0] += hs[-1].T @ g
            g = g @ self._last().T
            interior = [(1, l), (2, t), (3, m)]
        else:
            grads[3][:, :, 0] += hs[-1].T @ g
            g = g @ self._last().T
            interior = [(1, l), (2, m)]

        for pos, (k, i) in zip(range(len(interior), 0, -1), reversed(interior)):
            grads[k][:, i, :] += hs[pos].T @ g
            g = g @ cores[k][:, i, :].T
        grads[0][0] += hs[0].T @ g
        return g @ self._first().T


def delta_matrix(adapter: MetaTTAdapter, l: int, m: int, h: int = None, t: int = None) -> np.ndarray:
    """Materialized (unscaled) correction matrix for one site.

    For tt5d the heads are concatenated into contiguous output-column
    blocks (head h occupies columns [h*d_out/H, (h+1)*d_out/H)); passing
    ``h`` returns just that block.
    """
    adapter._check_site(l, m, t)
    spec = adapter.spec
    if spec.variant == "lora":
        return adapter.lora_a[l, m] @ adapter.lora_b[l, m]
    acc = adapter._first()
    for mat in adapter._interior_slices(l, m, t):
        acc = acc @ mat
    if spec.variant != "tt5d":
        return acc @ adapter._last()
    head_core = adapter.train.cores[3]
    last = adapter._last()
    if h is not None:
        if not 0 <= h < spec.num_heads:
            raise IndexError(f"head index {h} out of range [0, {spec.num_heads})")
        return acc @ head_core[:, h, :] @ last
    return np.concatenate([acc @ head_core[:, k, :] @ last for k in range(spec.num_heads)], axis=1)


def adapted_forward(adapter: MetaTTAdapter, x: np.ndarray, w_frozen: np.ndarray,
                    l: int, m: int, t: int = None) -> np.ndarray:
    """x @ w_frozen + alpha * (site correction applied to activations)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != adapter.spec.d_in:
        raise ValueError(f"input shape {x.shape} does not match d_in {adapter.spec.d_in}")
    if w_frozen.shape != (adapter.spec.d_in, adapter.spec.d_out):
        raise ValueError(
            f"frozen weight shape {w_frozen.shape} does not match ({adapter.spec.d_in}, {adapter.spec.d_out})"
        )
    delta, _ = adapter.site_forward(x, l, m, t)
    return x @ w_frozen + adapter.alpha * delta


def build(spec: AdapterSpec, seed: int = 0) -> MetaTTAdapter:
    """Construct an adapter with its init strategy applied, core by core.

    Every strategy accepted by AdapterSpec contains a ze core, so a fresh
    adapter's correction is exactly zero at every site.
    """
    rng = np.random.default_rng(seed)
    if spec.variant == "lora":
        r = spec.bond_ranks[0]
        a = rng.normal(0.0, LORA_A_STD, size=(spec.num_layers, spec.num_modules, spec.d_in, r))
        b = np.zeros((spec.num_layers, spec.num_modules, r, spec.d_out))
        return MetaTTAdapter(spec, lora_a=a, lora_b=b)

    modes = spec.mode_sizes
    ranks = (1,) + spec.bond_ranks + (1,)
    cores = []
    last = len(modes) - 1
    for k, tag in enumerate(spec.init_tags):
        shape = (ranks[k], modes[k], ranks[k + 1])
        if tag == "ze":
            core = np.zeros(shape)
        elif tag == "no":
            core = rng.normal(0.0, NORMAL_INIT_STD, size=shape)
        elif k == 0:
            # boundary: identity on the (d_in, r1) matrix view
            core = np.eye(modes[0], ranks[1]).reshape(shape)
        elif k == last:
            core = np.eye(ranks[last], modes[last]).reshape(shape)
        else:
            core = np.empty(shape)
            core[:] = np.eye(ranks[k], ranks[k + 1])[:, None, :]
        cores.append(core)
    return MetaTTAdapter(spec, train=TensorTrain(cores))


def random_adapter(spec: AdapterSpec, rng, scale: float = 1.0) -> MetaTTAdapter:
    """Fully random (non-zero) adapter; used for teachers and stress tests."""
    if spec.variant == "lora":
        r = spec.bond_ranks[0]
        a = rng.normal(0.0, scale, size=(spec.num_layers, spec.num_modules, spec.d_in, r))
        b = rng.normal(0.0, scale, size=(spec.num_layers, spec.num_modules, r, spec.d_out))
        return MetaTTAdapter(spec, lora_a=a, lora_b=b)
    train = tt_mod.random_train(spec.mode_sizes, spec.bond_ranks, rng, scale=scale)
    return MetaTTAdapter(spec, train=train)


@dataclass
class MergedAdapter:
    """Inference form: first core kept, everything after it premultiplied.

    ``b`` maps each site key, (l, m) for tt4d/tt5d and (l, m, t) for
    tt4p1d, to an r x d_out matrix, so adapted inference is exactly two
    matrix products per call: (x @ a) @ b[key].
    """

    spec: AdapterSpec
    a: np.ndarray
    b: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    def site_key(self, l: int, m: int, t: int = None) -> tuple:
        return (l, m) if self.spec.variant != "tt4p1d" else (l, m, t)

    def site_forward(self, x: np.ndarray, l: int, m: int, t: int = None):
        return (x @ self.a) @ self.b[self.site_key(l, m, t)], None


def merge_for_inference(adapter: MetaTTAdapter) -> MergedAdapter:
    """Precompute per-site tail products so inference matches lora latency."""
    spec = adapter.spec
    if spec.variant == "lora":
        raise AdapterSpecError("lora adapters are already in two-matrix form; nothing to merge")
    merged = MergedAdapter(spec=spec, a=adapter._first().copy())
    sites = [
        (l, m, t)
        for l in range(spec.num_layers)
        for m in range(spec.num_modules)
        for t in (range(spec.num_tasks) if spec.variant == "tt4p1d" else (None,))
    ]
    for l, m, t in sites:
        acc = None
        for mat in adapter._interior_slices(l, m, t):
            acc = mat if acc is None else acc @ mat
        if spec.variant == "tt5d":
            head_core = adapter.train.cores[3]
            last = adapter._last()
            tail = np.concatenate(
                [acc @ head_core[:, h, :] @ last for h in range(spec.num_heads)], axis=1
            )
        else:
            tail = acc @ adapter._last()
        merged.b[merged.site_key(l, m, t)] = tail
    return merged


def baseline_lora_param_count(num_layers: int, num_modules: int, dim: int, rank: int) -> int:
    """Parameters of one independent (A, B) pair per site: 2*L*M*D*r."""
    if min(num_layers, num_modules, dim, rank) < 1:
        raise ValueError("all arguments must be positive")
    return 2 * num_layers * num_modules * dim * rank


def spec_param_count(spec: AdapterSpec) -> int:
    """Trainable-parameter total implied by a spec, without building it."""
    if spec.variant == "lora":
        r = spec.bond_ranks[0]
        return spec.num_layers * spec.num_modules * r * (spec.d_in + spec.d_out)
    modes = spec.mode_sizes
    ranks = (1,) + spec.bond_ranks + (1,)
    return sum(ranks[k] * modes[k] * ranks[k + 1] for k in range(len(modes)))
