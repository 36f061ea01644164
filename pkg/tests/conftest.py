"""Shared fixtures: a tiny model configuration that every suite reuses."""

import numpy as np
import pytest

from replygen import Dims, Rng
from replygen.corpus import BOS_ID, EOS_ID, _pack
from replygen.training import init_params

TINY = Dims(d_h=8, d_emb=6, d_a=8, d_L=6, d_r=8, v_post=12, v_resp=12)

# content ids live in 4..11 for the tiny 12-token vocabularies
FIRST_CONTENT = 4


@pytest.fixture
def tiny_dims():
    return TINY


@pytest.fixture
def make_params():
    """Factory: make_params(scheme, seed=0, low=-0.1, high=0.1, dims=TINY)."""
    def factory(scheme, seed=0, low=-0.1, high=0.1, dims=TINY):
        return init_params(scheme, dims, Rng(seed), low=low, high=high)
    return factory


@pytest.fixture
def small_batch():
    """Three pairs with ragged lengths, so padding paths are exercised."""
    posts = [[4, 5, 6, 7], [8, 9, 10], [11, 4]]
    resps = [[BOS_ID, 5, 6, 7, EOS_ID], [BOS_ID, 8, 9, EOS_ID], [BOS_ID, 10, EOS_ID]]
    return _pack(posts, resps)


def random_post(rng, max_len=6, vocab=TINY.v_post):
    """A random nonempty content-only post id list."""
    n = rng.randrange(max_len) + 1
    return [FIRST_CONTENT + rng.randrange(vocab - FIRST_CONTENT) for _ in range(n)]


def toy_corpus():
    """20 distinct post/response pairs over a small shared token set.

    The post determines the response (no post appears twice), which is what
    the overfit and warm-start tests need.
    """
    from replygen.corpus import PostResponsePair

    words = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot",
             "golf", "hotel"]
    pairs = []
    for i in range(20):
        d0, d1 = i % 8, i // 8  # distinct (d0, d1) per i
        post = [words[d0], words[d1], words[(d0 + d1) % 8]]
        resp = [words[(3 * d0 + 1) % 8], words[(d1 + 2) % 8]]
        if i % 2:
            resp.append(words[(d0 + 5) % 8])
        pairs.append(PostResponsePair(post, resp))
    return pairs
