"""
Neural Network Core

Dense numpy kernels with hand-derived backward passes:

- multi-layer GRU stack (batched, masked, resumable)
- additive (Bahdanau) attention with masking
- tanh MLP with scalar logit output
- clamped binary cross-entropy
- Adam optimizer
- tensor (de)serialization with 17 significant digits

All arithmetic is float64. Parameters live in one flat ``{name: ndarray}``
mapping; the layer objects below hold references into it so optimizer updates
are visible everywhere without copying.
"""

import logging

import numpy as np

from .exceptions import DimensionMismatchError, NonFiniteError

logger = logging.getLogger(__name__)

DTYPE = np.float64

# Recorded in every bundle manifest so serialized models are unambiguous.
GRU_CONVENTION = 'h_next = (1 - z) * h + z * h_tilde'

GRU_KEYS = ('W_z', 'U_z', 'b_z', 'W_r', 'U_r', 'b_r', 'W_h', 'U_h', 'b_h')

PROB_CLAMP = 1e-7


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)
    return arr


def init_uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)


# ----------------------------------------------------------------------
# GRU


def gru_step(layer, x, h):
    """
    One GRU update for a single layer.

    Args:
        layer: Mapping with W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h
        x: Input, shape (..., I)
        h: Previous state, shape (..., H)

    Returns:
        np.ndarray: next state, shape (..., H)
    """
    if x.shape[-1] != layer['W_z'].shape[1] or h.shape[-1] != layer['U_z'].shape[0]:
        raise DimensionMismatchError(
            f"GRU layer expects input {layer['W_z'].shape[1]} / state {layer['U_z'].shape[0]}, "
            f"got {x.shape[-1]} / {h.shape[-1]}"
        )
    z = sigmoid(x @ layer['W_z'].T + h @ layer['U_z'].T + layer['b_z'])
    r = sigmoid(x @ layer['W_r'].T + h @ layer['U_r'].T + layer['b_r'])
    h_tilde = np.tanh(x @ layer['W_h'].T + (r * h) @ layer['U_h'].T + layer['b_h'])
    return (1.0 - z) * h + z * h_tilde


class GruStack:
    """L stacked GRU layers of hidden size H; layer 0 reads the feature width."""

    def __init__(self, layers):
        if not layers:
            raise DimensionMismatchError("A GRU stack needs at least one layer")
        self.layers = layers
        self.hidden = layers[0]['U_z'].shape[0]
        self.input_dim = layers[0]['W_z'].shape[1]
        # Layer-step counter; lets callers assert O(1) incremental cost.
        self.step_count = 0

    @staticmethod
    def init_params(rng, prefix, input_dim, hidden, num_layers, scale):
        params = {}
        for index in range(num_layers):
            width = input_dim if index == 0 else hidden
            for gate in ('z', 'r', 'h'):
                params[f'{prefix}.l{index}.W_{gate}'] = init_uniform(rng, (hidden, width), scale)
                params[f'{prefix}.l{index}.U_{gate}'] = init_uniform(rng, (hidden, hidden), scale)
                params[f'{prefix}.l{index}.b_{gate}'] = np.zeros(hidden, dtype=DTYPE)
        return params

    @classmethod
    def from_params(cls, params, prefix):
        layers = []
        index = 0
        while f'{prefix}.l{index}.W_z' in params:
            layers.append({key: params[f'{prefix}.l{index}.{key}'] for key in GRU_KEYS})
            index += 1
        return cls(layers)

    @staticmethod
    def param_names(prefix, num_layers):
        return [f'{prefix}.l{i}.{key}' for i in range(num_layers) for key in GRU_KEYS]

    def zero_state(self, batch_shape=()):
        return [np.zeros(batch_shape + (self.hidden,), dtype=DTYPE) for _ in self.layers]

    def step(self, x, states):
        """Advance every layer by one input; returns (top output, new states)."""
        new_states = []
        inp = x
        for layer, h in zip(self.layers, states):
            inp = gru_step(layer, inp, h)
            new_states.append(inp)
            self.step_count += 1
        return inp, new_states

    def forward(self, X, mask=None, h0=None):
        """
        Run the stack over a padded batch.

        Args:
            X: (B, T, I) inputs
            mask: (B, T) validity; padded steps carry the state unchanged
            h0: Optional list of (B, H) initial states per layer

        Returns:
            tuple: (outputs (B, T, H) of the top layer, final states, cache)
        """
        B, T, width = X.shape
        if width != self.input_dim:
            raise DimensionMismatchError(
                f"GRU stack expects input width {self.input_dim}, got {width}"
            )
        m = np.ones((B, T), dtype=DTYPE) if mask is None else mask.astype(DTYPE)
        states = self.zero_state((B,)) if h0 is None else [h.copy() for h in h0]
        caches = []
        inp = X
        finals = []
        for layer, h in zip(self.layers, states):
            xz = inp @ layer['W_z'].T + layer['b_z']
            xr = inp @ layer['W_r'].T + layer['b_r']
            xh = inp @ layer['W_h'].T + layer['b_h']
            H = self.hidden
            outs = np.zeros((B, T, H), dtype=DTYPE)
            prev = np.zeros((B, T, H), dtype=DTYPE)
            zs = np.zeros((B, T, H), dtype=DTYPE)
            rs = np.zeros((B, T, H), dtype=DTYPE)
            cs = np.zeros((B, T, H), dtype=DTYPE)
            for t in range(T):
                prev[:, t] = h
                z = sigmoid(xz[:, t] + h @ layer['U_z'].T)
                r = sigmoid(xr[:, t] + h @ layer['U_r'].T)
                c = np.tanh(xh[:, t] + (r * h) @ layer['U_h'].T)
                h_new = (1.0 - z) * h + z * c
                mt = m[:, t, None]
                h = mt * h_new + (1.0 - mt) * h
                outs[:, t], zs[:, t], rs[:, t], cs[:, t] = h, z, r, c
            self.step_count += T
            caches.append({'x': inp, 'prev': prev, 'z': zs, 'r': rs, 'c': cs})
            finals.append(h)
            inp = outs
        return inp, finals, {'layers': caches, 'mask': m}

    def backward(self, cache, d_out, d_final=None):
        """
        Backpropagate through time.

        Args:
            cache: From forward()
            d_out: (B, T, H) gradient w.r.t. top-layer outputs
            d_final: Optional list of (B, H) gradients w.r.t. final states

        Returns:
            tuple: (dX (B, T, I), {layer_index: {key: grad}}, dh0 list)
        """
        m = cache['mask']
        grads = {}
        dh0 = [None] * len(self.layers)
        d_above = d_out
        for index in reversed(range(len(self.layers))):
            layer = self.layers[index]
            lc = cache['layers'][index]
            x, prev, zs, rs, cs = lc['x'], lc['prev'], lc['z'], lc['r'], lc['c']
            B, T, H = prev.shape
            carry = np.zeros((B, H), dtype=DTYPE) if d_final is None or d_final[index] is None \
                else d_final[index].copy()
            daz = np.zeros((B, T, H), dtype=DTYPE)
            dar = np.zeros((B, T, H), dtype=DTYPE)
            dac = np.zeros((B, T, H), dtype=DTYPE)
            for t in reversed(range(T)):
                mt = m[:, t, None]
                dh = d_above[:, t] + carry
                dh_new = mt * dh
                z, r, c, hp = zs[:, t], rs[:, t], cs[:, t], prev[:, t]
                dz = dh_new * (c - hp)
                dc = dh_new * z
                dprev = dh_new * (1.0 - z) + (1.0 - mt) * dh
                a_c = dc * (1.0 - c * c)
                drh = a_c @ layer['U_h']
                dprev += drh * r
                a_r = drh * hp * r * (1.0 - r)
                a_z = dz * z * (1.0 - z)
                dprev += a_r @ layer['U_r'] + a_z @ layer['U_z']
                daz[:, t], dar[:, t], dac[:, t] = a_z, a_r, a_c
                carry = dprev
            dh0[index] = carry
            grads[index] = {
                'W_z': np.einsum('bth,bti->hi', daz, x),
                'W_r': np.einsum('bth,bti->hi', dar, x),
                'W_h': np.einsum('bth,bti->hi', dac, x),
                'U_z': np.einsum('bth,btk->hk', daz, prev),
                'U_r': np.einsum('bth,btk->hk', dar, prev),
                'U_h': np.einsum('bth,btk->hk', dac, rs * prev),
                'b_z': daz.sum(axis=(0, 1)),
                'b_r': dar.sum(axis=(0, 1)),
                'b_h': dac.sum(axis=(0, 1)),
            }
            d_above = daz @ layer['W_z'] + dar @ layer['W_r'] + dac @ layer['W_h']
        return d_above, grads, dh0

    @staticmethod
    def named_grads(prefix, grads):
        return {
            f'{prefix}.l{index}.{key}': value
            for index, layer_grads in grads.items()
            for key, value in layer_grads.items()
        }


def gru_sequence(stack, X, h0=None):
    """
    Encode one unbatched sequence.

    Args:
        stack: GruStack
        X: (T, I) inputs; T may be 0
        h0: Optional per-layer (H,) states to resume from

    Returns:
        tuple: (X_hat (T, H), final per-layer states)
    """
    X = np.asarray(X, dtype=DTYPE).reshape(-1, stack.input_dim)
    if X.shape[0] == 0:
        states = stack.zero_state() if h0 is None else [h.copy() for h in h0]
        return np.zeros((0, stack.hidden), dtype=DTYPE), states
    batched_h0 = None if h0 is None else [h[None, :] for h in h0]
    outputs, finals, _ = stack.forward(X[None], h0=batched_h0)
    return outputs[0], [h[0] for h in finals]


# ----------------------------------------------------------------------
# Attention


class AdditiveAttention:
    """score_j = v . tanh(W_q q + W_k k_j), softmax over unmasked positions."""

    def __init__(self, W_q, W_k, v):
        self.W_q, self.W_k, self.v = W_q, W_k, v

    @staticmethod
    def init_params(rng, prefix, query_dim, key_dim, hidden, scale):
        return {
            f'{prefix}.W_q': init_uniform(rng, (hidden, query_dim), scale),
            f'{prefix}.W_k': init_uniform(rng, (hidden, key_dim), scale),
            f'{prefix}.v': init_uniform(rng, (hidden,), scale),
        }

    @classmethod
    def from_params(cls, params, prefix):
        return cls(params[f'{prefix}.W_q'], params[f'{prefix}.W_k'], params[f'{prefix}.v'])

    def forward(self, q, keys, values, mask, req):
        """
        Attend N queries over per-request key/value sets.

        Args:
            q: (N, Dq) queries
            keys: (B, M, Dk); values: (B, M, Dv); mask: (B, M) bool
            req: (N,) request index of each query

        Returns:
            tuple: (weights (N, M), context (N, Dv), cache)
        """
        if q.shape[1] != self.W_q.shape[1] or keys.shape[2] != self.W_k.shape[1]:
            raise DimensionMismatchError(
                f"Attention expects query {self.W_q.shape[1]} / key {self.W_k.shape[1]}, "
                f"got {q.shape[1]} / {keys.shape[2]}"
            )
        qp = q @ self.W_q.T
        kp = keys @ self.W_k.T
        E = np.tanh(qp[:, None, :] + kp[req])
        scores = E @ self.v
        mk = mask[req]
        masked = np.where(mk, scores, -np.inf)
        row_max = np.max(masked, axis=1, initial=-np.inf, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        expd = np.where(mk, np.exp(np.where(mk, scores, 0.0) - row_max), 0.0)
        denom = expd.sum(axis=1, keepdims=True)
        weights = np.divide(expd, denom, out=np.zeros_like(expd), where=denom > 0)
        vg = values[req]
        context = np.einsum('nm,nmd->nd', weights, vg)
        cache = {'q': q, 'keys': keys, 'vg': vg, 'E': E, 'w': weights, 'req': req,
                 'B': keys.shape[0], 'values_shape': values.shape}
        return weights, context, cache

    def backward(self, cache, d_context):
        w, E, vg, req = cache['w'], cache['E'], cache['vg'], cache['req']
        dw = np.einsum('nd,nmd->nm', d_context, vg)
        d_values = np.zeros(cache['values_shape'], dtype=DTYPE)
        np.add.at(d_values, req, w[:, :, None] * d_context[:, None, :])
        ds = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
        g_v = np.einsum('nm,nma->a', ds, E)
        dA = ds[:, :, None] * self.v * (1.0 - E * E)
        dqp = dA.sum(axis=1)
        dkp = np.zeros((cache['B'],) + dA.shape[1:], dtype=DTYPE)
        np.add.at(dkp, req, dA)
        grads = {
            'W_q': dqp.T @ cache['q'],
            'W_k': np.einsum('bma,bmk->ak', dkp, cache['keys']),
            'v': g_v,
        }
        return dqp @ self.W_q, dkp @ self.W_k, d_values, grads


def additive_attention(q, K, V, mask, params):
    """
    Single-query attention.

    Args:
        q: (Dq,) query
        K: (M, Dk) keys; V: (M, Dv) values; mask: (M,) bool
        params: Mapping with W_q, W_k, v

    Returns:
        tuple: (weights (M,), context (Dv,)); all zero when every position is masked
    """
    K = np.asarray(K, dtype=DTYPE)
    V = np.asarray(V, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if not (K.shape[0] == V.shape[0] == mask.shape[0]):
        raise DimensionMismatchError("Keys, values and mask must have equal length")
    att = AdditiveAttention(params['W_q'], params['W_k'], params['v'])
    if K.shape[0] == 0:
        return np.zeros(0, dtype=DTYPE), np.zeros(V.shape[1] if V.ndim == 2 else 0, dtype=DTYPE)
    weights, context, _ = att.forward(
        np.asarray(q, dtype=DTYPE)[None], K[None], V[None], mask[None], np.zeros(1, dtype=int)
    )
    return weights[0], context[0]


# ----------------------------------------------------------------------
# MLP and loss


class Mlp:
    """Hidden tanh layers followed by a linear scalar output."""

    def __init__(self, weights, biases):
        self.weights = weights
        self.biases = biases

    @staticmethod
    def init_params(rng, prefix, input_dim, hidden, scale):
        params = {}
        width = input_dim
        for index, size in enumerate(hidden):
            params[f'{prefix}.l{index}.W'] = init_uniform(rng, (size, width), scale)
            params[f'{prefix}.l{index}.b'] = np.zeros(size, dtype=DTYPE)
            width = size
        params[f'{prefix}.out.W'] = init_uniform(rng, (1, width), scale)
        params[f'{prefix}.out.b'] = np.zeros(1, dtype=DTYPE)
        return params

    @classmethod
    def from_params(cls, params, prefix):
        weights, biases = [], []
        index = 0
        while f'{prefix}.l{index}.W' in params:
            weights.append(params[f'{prefix}.l{index}.W'])
            biases.append(params[f'{prefix}.l{index}.b'])
            index += 1
        weights.append(params[f'{prefix}.out.W'])
        biases.append(params[f'{prefix}.out.b'])
        return cls(weights, biases)

    @staticmethod
    def layer_names(prefix, count):
        names = [f'{prefix}.l{i}' for i in range(count - 1)]
        return names + [f'{prefix}.out']

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    def forward(self, X):
        if X.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"MLP expects input width {self.input_dim}, got {X.shape[1]}"
            )
        activations = [X]
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W.T + b)
            activations.append(h)
        logits = (h @ self.weights[-1].T + self.biases[-1])[:, 0]
        return logits, activations

    def backward(self, activations, d_logits):
        grads = []
        d = d_logits[:, None]
        grads.append((d.T @ activations[-1], d.sum(axis=0)))
        d_h = d @ self.weights[-1]
        for index in reversed(range(len(self.weights) - 1)):
            h = activations[index + 1]
            da = d_h * (1.0 - h * h)
            grads.append((da.T @ activations[index], da.sum(axis=0)))
            d_h = da @ self.weights[index]
        grads.reverse()
        return d_h, grads

    @staticmethod
    def named_grads(prefix, grads):
        named = {}
        names = Mlp.layer_names(prefix, len(grads))
        for name, (gW, gb) in zip(names, grads):
            named[f'{name}.W'] = gW
            named[f'{name}.b'] = gb
        return named


def bce_loss(p, y):
    """Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=DTYPE), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=DTYPE)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_with_logits(logits, labels):
    """
    Loss, probabilities and d(loss)/d(logits) for the mean clamped BCE.

    The clamp is part of the loss, so its gradient is zero where it is active.
    """
    p = sigmoid(logits)
    loss = bce_loss(p, labels)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    d_logits = np.where(inside, p - labels, 0.0) / max(len(labels), 1)
    return loss, p, d_logits


# ----------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam over a flat parameter mapping; updates arrays in place."""

    def __init__(self, params, lr=0.005, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, grads):
        for name, grad in grads.items():
            check_finite(f'grad:{name}', grad)
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            self.params[name] -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)


def adam_step(optimizer, grads):
    optimizer.step(grads)


# ----------------------------------------------------------------------
# Serialization


def tensor_to_record(name, arr):
    arr = np.asarray(arr, dtype=DTYPE)
    return {
        'name': name,
        'shape': list(arr.shape),
        'values': ' '.join(format(float(v), '.17g') for v in arr.ravel()),
    }


def tensor_from_record(record):
    shape = tuple(int(d) for d in record['shape'])
    text = record['values'].strip()
    data = np.array(text.split(), dtype=DTYPE) if text else np.zeros(0, dtype=DTYPE)
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise DimensionMismatchError(
            f"Tensor '{record['name']}' declares shape {shape} but holds {data.size} values"
        )
    return record['name'], data.reshape(shape)
