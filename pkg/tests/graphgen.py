"""Seeded random graphs that are valid by construction.

Every draw respects the loader's typing rules (int tensors only reach the
vector unit as i8/u8, i32 appears solely as a contraction accumulator, group
ops stay float), so a failure downstream is a scheduler or machine bug, not
a malformed graph.
"""

import math

import numpy as np

DIMS = (4, 8, 12, 16, 24, 32, 48)

# rough log2 bound on |value| a float tensor may reach before the next op;
# keeps f16 graphs clear of overflow and f32 graphs clear of precision loss
# that would drown the comparison tolerance (ints wrap or saturate exactly
# on both sides, so they go uncapped)
_MAG_CAP = {"f16": 11.0, "f32": 18.0}


def _shape_text(shape):
    return "x".join(str(d) for d in shape)


def _factor(rng, total, parts):
    """Split total into `parts` factors > 1 where possible."""
    dims = []
    rest = total
    for _ in range(parts - 1):
        opts = [f for f in range(2, min(rest, 64) + 1) if rest % f == 0]
        if not opts:
            break
        f = int(rng.choice(opts))
        dims.append(f)
        rest //= f
    dims.append(rest)
    rng.shuffle(dims)
    return tuple(dims)


class _Gen:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.lines = []
        self.n = 0
        self.live = {}          # (shape, dtype) -> [names]
        self.mag = {}           # name -> log2 |value| estimate

    def fresh(self):
        self.n += 1
        return f"t{self.n}"

    def remember(self, name, shape, dtype, mag):
        self.live.setdefault((shape, dtype), []).append(name)
        self.mag[name] = mag
        return name

    def source(self, shape, dtype, force_input=False):
        name = self.fresh()
        use_const = self.rng.random() < 0.35 and not force_input
        if use_const:
            # only full-rank random fills: structured inits such as arange
            # are rank deficient, and a contraction against one can leave
            # downstream normalizations with variance at noise level, where
            # no tolerance separates rounding paths from real bugs
            init = str(self.rng.choice(("normal", "uniform")))
            seed = int(self.rng.integers(100000))
            self.lines.append(
                f"constant {name} shape={_shape_text(shape)} dtype={dtype} "
                f"init={init} seed={seed}")
        else:
            self.lines.append(
                f"input {name} shape={_shape_text(shape)} dtype={dtype}")
        return self.remember(name, shape, dtype,
                             7.0 if dtype in ("i8", "u8") else 2.0)

    def operand(self, shape, dtype):
        have = self.live.get((shape, dtype), [])
        if have and self.rng.random() < 0.5:
            return str(self.rng.choice(have))
        return self.source(shape, dtype)

    def pool_bound(self, shape, dtype):
        """Largest magnitude operand() could hand back for this key."""
        have = self.live.get((shape, dtype), [])
        return max([self.mag[n] for n in have] + [2.0])

    def dim(self):
        return int(self.rng.choice(DIMS))


def random_graph_text(seed, max_ops=5):
    g = _Gen(seed)
    rng = g.rng

    float_dt = "f32" if rng.random() < 0.7 else "f16"
    if rng.random() < 0.25:
        state = _conv_prelude(g, float_dt)
    else:
        dt = str(rng.choice(("i8", "u8"))) if rng.random() < 0.3 else float_dt
        shape = (g.dim(), g.dim())
        state = (g.source(shape, dt, force_input=True), shape, dt, False)

    for _ in range(int(rng.integers(1, max_ops + 1))):
        state = _step(g, state, float_dt)

    outputs = [state[0]]
    flat = [n for names in g.live.values() for n in names]
    if len(flat) > 2 and rng.random() < 0.3:
        extra = str(rng.choice(flat))
        if extra != state[0]:
            outputs.append(extra)
    for o in dict.fromkeys(outputs):
        g.lines.append(f"output {o}")
    return "\n".join(g.lines) + "\n"


def _conv_prelude(g, float_dt):
    rng = g.rng
    dt = str(rng.choice(("i8", float_dt)))
    n = int(rng.integers(1, 3))
    h = int(rng.choice((5, 6, 8, 9)))
    cin = int(rng.choice((4, 8)))
    cout = int(rng.choice((4, 8, 16)))
    k = int(rng.choice((1, 3)))
    stride = int(rng.choice((1, 2)))
    pad = int(rng.choice((0, 1))) if k == 3 else 0
    x = g.source((n, h, h, cin), dt, force_input=True)
    w = g.source((k, k, cin, cout), dt)
    name = g.fresh()
    g.lines.append(f"conv2d {name} {x} {w} stride={stride} pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    shape = (n, ho, ho, cout)
    mag = g.mag[x] + g.mag[w] + 0.5 * math.log2(k * k * cin) + 1.0
    if dt == "i8":
        # raw accumulator: stays out of the operand pool, relu can fuse
        g.mag[name] = mag
        return name, shape, "i32", True
    if rng.random() < 0.5:
        g.remember(name, shape, dt, mag)
        pooled = g.fresh()
        kind = str(rng.choice(("max", "avg")))
        g.lines.append(f"pool {pooled} {name} kind={kind} k=2 stride=2")
        shape = (n, ho // 2, ho // 2, cout)
        name = pooled
    g.remember(name, shape, dt, mag)
    return name, shape, dt, False


def _step(g, state, float_dt):
    cur, shape, dt, raw_acc = state
    rng = g.rng
    cap = _MAG_CAP.get(dt, math.inf)
    m = g.mag[cur]
    choices = ["reshape"]
    if dt == "i32":
        # the accumulator may only flow through layout ops, a fusable relu
        # right at the contraction, or straight to an output
        if raw_acc:
            choices += ["relu", "relu"]
        if len(shape) == 2:
            choices += ["transpose"]
    else:
        ew = g.pool_bound(shape, dt)
        choices += ["relu"]
        if max(m, ew) + 1.0 <= cap:
            choices += ["add"]
        if m + ew <= cap:
            choices += ["mul"]
        if len(shape) == 2:
            bmag = max([g.mag[n] for (s, d), ns in g.live.items()
                        if d == dt and len(s) == 2 and s[0] == shape[1]
                        for n in ns] + [2.0])
            if m + bmag + 0.5 * math.log2(shape[1]) + 1.0 <= cap:
                choices += ["matmul", "matmul"]
            choices += ["transpose"]
        if dt in ("f16", "f32") and shape[-1] >= 2:
            choices += ["softmax", "layernorm"]
    kind = str(rng.choice(choices))
    name = g.fresh()
    raw_acc = False
    mag = m

    if kind == "matmul":
        ncol = g.dim()
        b = g.operand((shape[1], ncol), dt)
        g.lines.append(f"matmul {name} {cur} {b}")
        mag = m + g.mag[b] + 0.5 * math.log2(shape[1]) + 1.0
        shape = (shape[0], ncol)
        if dt in ("i8", "u8"):
            dt, raw_acc = "i32", True
    elif kind in ("add", "mul"):
        b = g.operand(shape, dt)
        g.lines.append(f"{kind} {name} {cur} {b}")
        mag = max(m, g.mag[b]) + 1.0 if kind == "add" else m + g.mag[b]
    elif kind == "relu":
        g.lines.append(f"relu {name} {cur}")
    elif kind in ("softmax", "layernorm"):
        g.lines.append(f"{kind} {name} {cur}")
        mag = 0.0 if kind == "softmax" else 2.0
    elif kind == "transpose":
        g.lines.append(f"transpose {name} {cur}")
        shape = (shape[1], shape[0])
    else:
        parts = int(rng.integers(2, 4))
        shape = _factor(rng, int(np.prod(shape)), parts)
        g.lines.append(f"reshape {name} {cur} shape={_shape_text(shape)}")

    if dt in ("i8", "u8"):
        mag = min(mag, 7.0)     # saturating narrow
    if dt != "i32":
        g.remember(name, shape, dt, mag)
    else:
        g.mag[name] = mag
    return name, shape, dt, raw_acc
