"""Maximum-likelihood training with hand-derived gradients.

The loss is the mean negative log-likelihood per framed response token
(content tokens plus the closing end marker). Backpropagation through the
decoder, the attention, and the masked encoder recurrences is written out
explicitly; there is no autodiff anywhere. `grad_check` compares every
analytic gradient against central finite differences and is the standing
proof that the derivation matches the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import make_batches
from .model import (
    Dims,
    EncodedPost,
    ModelParams,
    _decoder_step_full,
    _init_context,
    _run_encoder,
    decoder_init,
    init_params,
)
from .numerics import Rng, clip_global_norm

__all__ = [
    "TrainConfig",
    "init_params",
    "batch_loss",
    "backward",
    "grad_check",
    "sgd_step",
    "init_hybrid_from_pretrained",
    "train",
    "corpus_perplexity",
]


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 16
    clip_norm: float | None = 1.0
    max_response_len: int | None = 30


def _forward(params: ModelParams, batch, keep: bool):
    """Shared forward pass. Returns (loss, token_count, aux).

    aux carries every intermediate the backward pass needs; it is None when
    keep is False so evaluation costs no extra memory.
    """
    enc_states, enc_final, enc_caches = _run_encoder(
        params.enc, params.E_x, batch.post_ids, batch.post_mask, keep)
    global_final, encg_caches = None, None
    if params.scheme == "hyb":
        _, global_final, encg_caches = _run_encoder(
            params.enc_g, params.E_x, batch.post_ids, batch.post_mask, keep)
    enc_out = EncodedPost(states=enc_states, mask=batch.post_mask,
                          lengths=batch.post_lengths, final=enc_final,
                          global_final=global_final)
    c0 = _init_context(params, enc_out)
    s0 = decoder_init(params, enc_out)

    b, t_resp = batch.resp_ids.shape
    rows = np.arange(b)
    s = s0
    loss_sum = 0.0
    dec_caches = [] if keep else None
    for t in range(t_resp - 1):
        s, logp, _, cache = _decoder_step_full(params, enc_out, s, batch.resp_ids[:, t])
        target = batch.resp_ids[:, t + 1]
        m = batch.resp_mask[:, t + 1]
        loss_sum -= float((m * logp[rows, target]).sum())
        if keep:
            cache["target"] = target
            cache["mask"] = m
            dec_caches.append(cache)

    token_count = float(batch.resp_mask[:, 1:].sum())
    if token_count == 0.0:
        raise ValueError("batch has no response tokens to score")
    loss = loss_sum / token_count
    if not keep:
        return loss, token_count, None
    aux = {
        "enc_out": enc_out, "enc_caches": enc_caches, "encg_caches": encg_caches,
        "c0": c0, "s0": s0, "dec_caches": dec_caches,
    }
    return loss, token_count, aux


def batch_loss(params: ModelParams, batch):
    """Mean per-token negative log-likelihood of a batch; returns (loss, n_tokens)."""
    loss, token_count, _ = _forward(params, batch, keep=False)
    return loss, token_count


def _gru_backward(grads, prefix, cell, x, h_prev, z, r, hbar, dh):
    """Backprop one cell step. Accumulates into grads; returns (dx, dh_prev)."""
    dz = dh * (hbar - h_prev)
    dhbar = dh * z
    dh_prev = dh * (1.0 - z)

    dpre_h = dhbar * (1.0 - hbar * hbar)
    grads[prefix + ".W_h"] += dpre_h.T @ x
    grads[prefix + ".U_h"] += dpre_h.T @ (r * h_prev)
    grads[prefix + ".b_h"] += dpre_h.sum(axis=0)
    drh = dpre_h @ cell.U_h
    dr = drh * h_prev
    dh_prev += drh * r

    dpre_z = dz * z * (1.0 - z)
    grads[prefix + ".W_z"] += dpre_z.T @ x
    grads[prefix + ".U_z"] += dpre_z.T @ h_prev
    grads[prefix + ".b_z"] += dpre_z.sum(axis=0)
    dh_prev += dpre_z @ cell.U_z

    dpre_r = dr * r * (1.0 - r)
    grads[prefix + ".W_r"] += dpre_r.T @ x
    grads[prefix + ".U_r"] += dpre_r.T @ h_prev
    grads[prefix + ".b_r"] += dpre_r.sum(axis=0)
    dh_prev += dpre_r @ cell.U_r

    dx = dpre_z @ cell.W_z + dpre_r @ cell.W_r + dpre_h @ cell.W_h
    return dx, dh_prev


def _attention_backward(grads, params, hstates, hs_ua, alpha, s_prev, dc,
                        dstates, dglobal_final):
    """Backprop one step of the additive scorer and the weighted sum.

    Padded positions carry alpha == 0 exactly, so every term below vanishes
    there without explicit masking. Returns the gradient w.r.t. s_prev.
    """
    a = params.attn
    ta = np.tanh((s_prev @ a.W_a.T)[:, None, :] + hs_ua + a.b_a)

    # c = sum_j alpha_j h_j
    dalpha = np.einsum("bd,btd->bt", dc, hstates)
    dhs = alpha[:, :, None] * dc[:, None, :]

    # softmax jacobian, then the scorer
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    grads["attn.v_a"] += np.einsum("bt,bta->a", de, ta)
    dpre = (de[:, :, None] * a.v_a) * (1.0 - ta * ta)
    dproj = dpre.sum(axis=1)
    grads["attn.W_a"] += dproj.T @ s_prev
    grads["attn.U_a"] += np.einsum("bta,btd->ad", dpre, hstates)
    grads["attn.b_a"] += dpre.sum(axis=(0, 1))
    dhs += np.einsum("bta,ad->btd", dpre, a.U_a)

    d_h = params.dims.d_h
    if params.scheme == "hyb":
        dstates += dhs[:, :, :d_h]
        dglobal_final += dhs[:, :, d_h:].sum(axis=1)
    else:
        dstates += dhs
    return dproj @ a.W_a


def _encoder_backward(grads, prefix, cell, ids, mask, caches, dstates, dfinal):
    """Backprop a masked recurrence. Padded steps pass the carry through."""
    dcarry = dfinal.copy()
    for t in reversed(range(ids.shape[1])):
        x, h_prev, z, r, hbar = caches[t]
        m = mask[:, t][:, None]
        dh_hat = (dcarry + dstates[:, t, :]) * m
        dx, dh_prev = _gru_backward(grads, prefix, cell, x, h_prev, z, r, hbar, dh_hat)
        dcarry = dcarry * (1.0 - m) + dh_prev
        np.add.at(grads["E_x"], ids[:, t], dx)


def backward(params: ModelParams, batch):
    """Loss and its gradient for every tensor; returns (loss, grads dict).

    Gradient keys match ModelParams.named_tensors(). The loss here is
    bit-identical to batch_loss on the same inputs.
    """
    loss, token_count, aux = _forward(params, batch, keep=True)
    tensors = params.named_tensors()
    grads = {name: np.zeros_like(arr) for name, arr in tensors.items()}

    enc_out = aux["enc_out"]
    d_h = params.dims.d_h
    d_emb = params.dims.d_emb
    b = batch.post_ids.shape[0]
    rows = np.arange(b)
    lam = 1.0 / token_count

    hstates = hs_ua = None
    if params.attn is not None:
        if params.scheme == "hyb":
            t_max = enc_out.states.shape[1]
            g = np.broadcast_to(enc_out.global_final[:, None, :], (b, t_max, d_h))
            hstates = np.concatenate([enc_out.states, g], axis=2)
        else:
            hstates = enc_out.states
        hs_ua = hstates @ params.attn.U_a.T

    dstates = np.zeros_like(enc_out.states)
    dfinal = np.zeros((b, d_h))
    dglobal_final = np.zeros((b, d_h)) if params.scheme == "hyb" else None

    ds_carry = np.zeros((b, d_h))
    for cache in reversed(aux["dec_caches"]):
        dlogits = cache["probs"].copy()
        dlogits[rows, cache["target"]] -= 1.0
        dlogits *= (lam * cache["mask"])[:, None]

        grads["W_o"] += dlogits.T @ cache["rout"]
        grads["b_o"] += dlogits.sum(axis=0)
        da = (dlogits @ params.W_o) * (1.0 - cache["rout"] ** 2)
        grads["W_s"] += da.T @ cache["s_t"]
        grads["W_y"] += da.T @ cache["y_emb"]
        grads["W_c"] += da.T @ cache["c"]
        grads["b_r"] += da.sum(axis=0)
        dy_emb = da @ params.W_y
        dc = da @ params.W_c
        ds = ds_carry + da @ params.W_s

        du, ds_prev = _gru_backward(grads, "dec", params.dec, cache["u"],
                                    cache["s_prev"], cache["z"], cache["r"],
                                    cache["hbar"], ds)
        dy_emb += du[:, :d_emb]
        dlc = du[:, d_emb:]
        grads["L"] += dlc.T @ cache["c"]
        dc += dlc @ params.L

        if params.scheme == "glo":
            dfinal += dc
        else:
            ds_prev += _attention_backward(grads, params, hstates, hs_ua,
                                           cache["alpha"], cache["s_prev"],
                                           dc, dstates, dglobal_final)
        np.add.at(grads["E_y"], cache["y_prev"], dy_emb)
        ds_carry = ds_prev

    # start state s_0 = tanh(W_0 c_init)
    da0 = ds_carry * (1.0 - aux["s0"] ** 2)
    grads["W_0"] += da0.T @ aux["c0"]
    dc0 = da0 @ params.W_0
    if params.scheme == "hyb":
        dfinal += dc0[:, :d_h]
        dglobal_final += dc0[:, d_h:]
    else:
        dfinal += dc0

    _encoder_backward(grads, "enc", params.enc, batch.post_ids, batch.post_mask,
                      aux["enc_caches"], dstates, dfinal)
    if params.scheme == "hyb":
        _encoder_backward(grads, "enc_g", params.enc_g, batch.post_ids,
                          batch.post_mask, aux["encg_caches"],
                          np.zeros_like(dstates), dglobal_final)
    return loss, grads


def grad_check(params: ModelParams, batch, eps: float = 1e-5, tol: float = 1e-4,
               max_entries: int | None = None, rng: Rng | None = None):
    """Compare analytic gradients against central finite differences.

    Every entry of every tensor is checked unless max_entries caps the count
    per tensor (then rng picks the sample). The relative error for entry i is
    |a_i - n_i| / max(|a_i|, |n_i|, 1e-8). Returns (ok, report) where report
    maps tensor names to their worst relative error.
    """
    _, grads = backward(params, batch)
    report: dict[str, float] = {}
    ok = True
    for name, arr in params.named_tensors().items():
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                raise ValueError("sampling entries requires an rng")
            picked = sorted({rng.randrange(flat.size) for _ in range(max_entries)})
        else:
            picked = range(flat.size)
        worst = 0.0
        for i in picked:
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = batch_loss(params, batch)
            flat[i] = orig - eps
            down, _ = batch_loss(params, batch)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            rel = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report[name] = worst
        ok = ok and worst <= tol
    return ok, report


def sgd_step(params: ModelParams, grads: dict, lr: float,
             clip_norm: float | None = None) -> float:
    """Plain SGD update in place; returns the global-norm scale applied."""
    if lr < 0.0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    tensors = params.named_tensors()
    names = list(tensors)
    glist = [grads[n] for n in names]
    factor = 1.0
    if clip_norm is not None:
        glist, factor = clip_global_norm(glist, clip_norm)
    for name, g in zip(names, glist):
        tensors[name] -= lr * g
    return factor


def init_hybrid_from_pretrained(loc_params: ModelParams, glo_params: ModelParams,
                                rng: Rng, low: float = -0.1, high: float = 0.1):
    """Warm-start a hybrid model from separately trained loc and glo models.

    The attention model contributes the input/output embeddings, the local
    encoder, the decoder, the readout, and the attention scorer's W_a, v_a,
    b_a; the glo model contributes its encoder as the second (global-summary)
    encoder, which from then on reads the attention model's embeddings. The
    four tensors whose width doubles with the concatenated context (L, W_0,
    W_c, attn.U_a) are freshly initialized.

    Returns (params, provenance) where provenance maps each tensor name to
    "loc", "glo", or "fresh".
    """
    if loc_params.scheme != "loc":
        raise ValueError(f"first source must use the loc scheme, got {loc_params.scheme!r}")
    if glo_params.scheme != "glo":
        raise ValueError(f"second source must use the glo scheme, got {glo_params.scheme!r}")
    ld, gd = loc_params.dims, glo_params.dims
    for field_name in ("d_h", "d_emb", "v_post", "v_resp"):
        if getattr(ld, field_name) != getattr(gd, field_name):
            raise ValueError(
                f"source models disagree on {field_name}: "
                f"{getattr(ld, field_name)} vs {getattr(gd, field_name)}")

    dims = Dims(d_h=ld.d_h, d_emb=ld.d_emb, d_a=ld.d_a, d_L=ld.d_L,
                d_r=ld.d_r, v_post=ld.v_post, v_resp=ld.v_resp)
    params = init_params("hyb", dims, rng, low, high)
    tensors = params.named_tensors()
    loc_t = loc_params.named_tensors()
    glo_t = glo_params.named_tensors()

    fresh = {"L", "W_0", "W_c", "attn.U_a"}
    provenance: dict[str, str] = {}
    for name in tensors:
        if name in fresh:
            provenance[name] = "fresh"
        elif name.startswith("enc_g."):
            np.copyto(tensors[name], glo_t["enc." + name[len("enc_g."):]])
            provenance[name] = "glo"
        else:
            np.copyto(tensors[name], loc_t[name])
            provenance[name] = "loc"
    return params, provenance


def train(params: ModelParams, pairs, vocabs, config: TrainConfig, rng: Rng,
          log_stream=None):
    """SGD over shuffled minibatches; returns [(epoch, mean_nll, ppl), ...].

    The reported numbers are the running training loss of each epoch
    (per-token NLL, weighted by batch token counts) and its exponential.
    Each history row is also written to log_stream as a tab-separated line
    when one is given.
    """
    if not pairs:
        raise ValueError("cannot train on an empty pair list")
    history = []
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(pairs, vocabs, config.batch_size, rng,
                               config.max_response_len)
        total_nll = 0.0
        total_tokens = 0.0
        for batch_index, batch in enumerate(batches):
            loss, grads = backward(params, batch)
            if not math.isfinite(loss):
                norms = ", ".join(f"{name}={float(np.linalg.norm(arr)):.3e}"
                                  for name, arr in params.named_tensors().items())
                raise RuntimeError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {batch_index}; "
                    f"tensor norms: {norms}")
            sgd_step(params, grads, config.lr, config.clip_norm)
            n_tok = float(batch.resp_mask[:, 1:].sum())
            total_nll += loss * n_tok
            total_tokens += n_tok
        mean_nll = total_nll / total_tokens
        try:
            ppl = math.exp(mean_nll)
        except OverflowError:
            ppl = float("inf")
        history.append((epoch, mean_nll, ppl))
        if log_stream is not None:
            log_stream.write(f"{epoch}\t{mean_nll:.6f}\t{ppl:.6f}\n")
            log_stream.flush()
    return history


def corpus_perplexity(params: ModelParams, pairs, vocabs, batch_size: int = 32,
                      max_response_len: int | None = None):
    """Mean per-token NLL and perplexity of a pair list, without updates."""
    if not pairs:
        raise ValueError("cannot evaluate an empty pair list")
    batches = make_batches(pairs, vocabs, batch_size, Rng(0), max_response_len)
    total_nll = 0.0
    total_tokens = 0.0
    for batch in batches:
        loss, n_tok = batch_loss(params, batch)
        total_nll += loss * n_tok
        total_tokens += n_tok
    mean_nll = total_nll / total_tokens
    try:
        ppl = math.exp(mean_nll)
    except OverflowError:
        ppl = float("inf")
    return mean_nll, ppl
