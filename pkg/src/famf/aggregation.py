"""Frame-feature aggregation layers: NetVLAD, GhostVLAD, AttentionVLAD.

All three map a variable-length set of N frame features (N x D) to a
fixed-size D x K template of soft-assigned residuals against trainable
cluster anchors.  AttentionVLAD additionally scales each cluster column
by a learned attention weight phi(c_k) in (0, 1); GhostVLAD computes the
assignment over K + G clusters and drops the G ghost columns, which is
exactly AttentionVLAD with phi fixed to 1 on real clusters and 0 on
ghosts.

The layers are pure functions of (input, params) built from autodiff
primitives, so gradients flow to the input and to every parameter.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, EmptyInputError


class AggregationParams:
    """Trainable cluster parameters plus the cluster-attention map.

    `a` (K_total x D) and `b` (K_total,) drive the soft assignment,
    `c` (K_total x D) holds the cluster anchors, and `w_phi`/`b_phi`
    define the affine map D -> 1 whose squashed output is the per-cluster
    attention weight.  For GhostVLAD, K_total = K + G and only the first
    K clusters survive into the output.
    """

    def __init__(self, a, b, c, w_phi, b_phi, K: int, G: int = 0,
                 phi_activation: str = "sigmoid"):
        self.a = a
        self.b = b
        self.c = c
        self.w_phi = w_phi
        self.b_phi = b_phi
        self.K = int(K)
        self.G = int(G)
        if self.K < 1 or self.G < 0:
            raise DimensionError(f"need K >= 1 and G >= 0, got K={K}, G={G}")
        if phi_activation != "sigmoid":
            raise ValueError(f"unsupported phi activation {phi_activation!r}")
        self.phi_activation = phi_activation
        kt, d = self.a.shape
        if kt != self.K + self.G or self.c.shape != (kt, d) or self.b.shape != (kt,):
            raise DimensionError("inconsistent cluster parameter shapes")
        for t in (a, b, c, w_phi, b_phi):
            if not np.all(np.isfinite(t.data)):
                raise DimensionError("aggregation parameters must be finite")

    @property
    def num_clusters(self) -> int:
        return self.K + self.G

    @property
    def feature_dim(self) -> int:
        return self.a.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"a": self.a, "b": self.b, "c": self.c,
                "w_phi": self.w_phi, "b_phi": self.b_phi}


def init_aggregation_params(feature_dim: int, K: int, G: int = 0,
                            sigma_init: float = 1.0,
                            rng: np.random.Generator | None = None,
                            phi_activation: str = "sigmoid") -> AggregationParams:
    """VLAD-style initialization tying assignment weights to the anchors.

    Anchors are unit-Gaussian draws scaled by 1/sqrt(D) (unit expected
    norm); a_k = 2*sigma*c_k and b_k = -sigma*||c_k||^2 make the initial
    soft assignment a distance-to-anchor softmax.  w_phi and b_phi start
    at zero so every cluster opens with attention weight 0.5.
    """
    rng = rng or np.random.default_rng(0)
    kt = K + G
    c = rng.standard_normal((kt, feature_dim)) / np.sqrt(feature_dim)
    a = 2.0 * sigma_init * c
    b = -sigma_init * (c * c).sum(axis=1)
    return AggregationParams(
        a=Tensor(a, requires_grad=True),
        b=Tensor(b, requires_grad=True),
        c=Tensor(c, requires_grad=True),
        w_phi=Tensor(np.zeros(feature_dim), requires_grad=True),
        b_phi=Tensor(np.zeros(1), requires_grad=True),
        K=K, G=G, phi_activation=phi_activation,
    )


def _check_input(x, params: AggregationParams) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"expected an N x D feature set, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError("aggregation over zero frames")
    if x.shape[1] != params.feature_dim:
        raise DimensionError(
            f"feature dim {x.shape[1]} does not match params dim {params.feature_dim}"
        )
    return x


def soft_assign(x, params: AggregationParams) -> Tensor:
    """Softmax over clusters of a_k^T x_i + b_k; rows sum to 1."""
    x = _check_input(x, params)
    logits = ad.add(ad.matmul(x, ad.transpose(params.a)), params.b)
    return ad.softmax(logits, axis=1)


def _residual_template(x: Tensor, alpha: Tensor, params: AggregationParams) -> Tensor:
    # V(j,k) = sum_i alpha[i,k] * (x[i,j] - c[k,j])
    #        = (x^T alpha)(j,k) - c^T(j,k) * colsum(alpha)(k)
    weighted = ad.matmul(ad.transpose(x), alpha)
    mass = ad.tsum(alpha, axis=0, keepdims=True)
    anchored = ad.mul(ad.transpose(params.c), mass)
    return ad.sub(weighted, anchored)


def netvlad(x, params: AggregationParams) -> Tensor:
    """Soft-assigned residual aggregation; output is D x K_total."""
    x = _check_input(x, params)
    alpha = soft_assign(x, params)
    return _residual_template(x, alpha, params)


def cluster_attention(params: AggregationParams) -> Tensor:
    """phi(c_k): squashed affine map of each anchor, a (1, K_total) row."""
    logits = ad.add(
        ad.matmul(params.c, ad.reshape(params.w_phi, (params.feature_dim, 1))),
        params.b_phi,
    )
    return ad.transpose(ad.sigmoid(logits))


def attention_vlad(x, params: AggregationParams,
                   phi_override: np.ndarray | None = None) -> Tensor:
    """NetVLAD with each cluster column scaled by its attention weight.

    `phi_override` replaces the learned weights with fixed constants
    (used by the reduction tests: all-ones recovers NetVLAD, a 0/1
    pattern recovers GhostVLAD pre-drop).
    """
    x = _check_input(x, params)
    alpha = soft_assign(x, params)
    v = _residual_template(x, alpha, params)
    if phi_override is not None:
        phi = Tensor(np.asarray(phi_override, dtype=np.float64).reshape(1, -1))
        if phi.shape[1] != params.num_clusters:
            raise DimensionError("phi override length must equal the cluster count")
    else:
        phi = cluster_attention(params)
    return ad.mul(v, phi)


def ghost_vlad(x, params: AggregationParams) -> Tensor:
    """NetVLAD over K + G clusters with the G ghost columns dropped.

    G = 0 is allowed (degenerates to plain NetVLAD); the pipeline
    constructs GhostVLAD params with G >= 1.
    """
    x = _check_input(x, params)
    v = netvlad(x, params)
    if params.G == 0:
        return v
    kept = ad.gather_rows(ad.transpose(v), np.arange(params.K))
    return ad.transpose(kept)


def normalize_template(v: Tensor, intra: bool = False, whole: bool = True,
                       eps: float = 1e-12) -> Tensor:
    """Optional per-cluster and whole-template L2 normalization.

    Note that per-cluster normalization cancels any per-cluster scaling,
    including the attention weights, so the pipeline default is
    whole-template only.
    """
    if intra:
        sumsq = ad.tsum(ad.mul(v, v), axis=0, keepdims=True)
        v = ad.mul(v, ad.pow_scalar(ad.add(sumsq, Tensor(np.full(sumsq.shape, eps))), -0.5))
    if whole:
        sumsq = ad.tsum(ad.mul(v, v))
        v = ad.mul(v, ad.pow_scalar(ad.add(sumsq, Tensor(eps)), -0.5))
    return v


def frame_weight_report(x, params: AggregationParams,
                        phi_override: np.ndarray | None = None) -> list[float]:
    """Per-frame effective weights in [0, 1] under the cluster attention.

    w_i = sum_k phi_k * alpha_k(x_i) / max_k phi_k, so a frame assigning
    entirely to the most-attended cluster scores 1 and a frame assigning
    entirely to a phi = 0 cluster scores 0.  This is a reporting
    construction over the layer's own quantities, not part of the
    forward pass.
    """
    x = _check_input(x, params)
    alpha = soft_assign(x, params).data
    if phi_override is not None:
        phi = np.asarray(phi_override, dtype=np.float64).reshape(-1)
    else:
        phi = cluster_attention(params).data.reshape(-1)
    top = phi.max()
    if top <= 0.0:
        return [0.0] * x.shape[0]
    return list((alpha @ phi) / top)
