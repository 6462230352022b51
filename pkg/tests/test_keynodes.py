import numpy as np
import pytest

from kndm.bitio import CorruptStream
from kndm.deform import compute_influence_weights
from kndm.keynodes import (decode_indices, encode_indices, generate_keynodes,
                           snap_to_vertices)
from kndm.mesh import Mesh
from kndm.registration import RegistrationParams, extract_transforms
from kndm.synth import generate_sequence

from conftest import random_blob_mesh


# --- index coding -----------------------------------------------------------

def test_encode_indices_hand_bytes():
    data = encode_indices([3, 10, 12])
    # count=3, then first value and gaps as varints
    assert data == b"\x03\x03\x07\x02"


def test_encode_single_zero():
    assert encode_indices([0]) == b"\x01\x00"


def test_index_round_trip_random(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        idx = np.sort(rng.choice(10000, size=n, replace=False))
        decoded, pos = decode_indices(encode_indices(idx))
        np.testing.assert_array_equal(decoded, idx)


def test_encode_rejects_non_monotone():
    with pytest.raises(ValueError):
        encode_indices([3, 3, 5])
    with pytest.raises(ValueError):
        encode_indices([5, 3])


def test_decode_truncated():
    data = encode_indices([1, 2, 3])
    with pytest.raises(CorruptStream):
        decode_indices(data[:2])


# --- snapping ------------------------------------------------------------------

def test_snap_nodes_already_on_vertices(rng):
    mesh = random_blob_mesh(rng)
    picks = np.array([7, 2, 11])
    nodes = snap_to_vertices(mesh, mesh.positions[picks])
    np.testing.assert_array_equal(nodes.anchor_indices, sorted(picks))
    np.testing.assert_array_equal(nodes.node_positions,
                                  mesh.positions[sorted(picks)])


def test_snap_deduplicates():
    mesh = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]),
                np.zeros((0, 3)))
    nodes = snap_to_vertices(mesh, np.array([[0.9, 0, 0], [1.1, 0, 0]]))
    assert len(set(nodes.anchor_indices.tolist())) == 2
    assert 1 in nodes.anchor_indices  # both were nearest to vertex 1


def test_snap_matches_brute_force_with_dedup(rng):
    mesh = Mesh(rng.normal(size=(100, 3)), np.zeros((0, 3)))
    raw = rng.normal(size=(5, 3))
    nodes = snap_to_vertices(mesh, raw)
    used = set()
    expected = []
    for p in raw:
        d2 = np.sum((mesh.positions - p) ** 2, axis=1)
        order = np.argsort(d2, kind="stable")
        pick = next(int(i) for i in order if int(i) not in used)
        used.add(pick)
        expected.append(pick)
    np.testing.assert_array_equal(nodes.anchor_indices, sorted(expected))


def test_snap_rejects_excess_nodes():
    mesh = Mesh(np.zeros((2, 3)) + np.arange(2)[:, None], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        snap_to_vertices(mesh, np.zeros((3, 3)))


# --- selection ---------------------------------------------------------------------

def _bend_pair(resolution=10):
    frames = generate_sequence("BEND", 3, resolution, seed=5)
    return frames[0], frames[2]


def test_generate_all_vertices_degenerate():
    source, target = _bend_pair(resolution=5)
    nodes = generate_keynodes(source, target, source.num_vertices,
                              RegistrationParams(max_outer_iters=5), seed=0)
    np.testing.assert_array_equal(nodes.anchor_indices,
                                  np.arange(source.num_vertices))


def test_generate_deterministic():
    source, target = _bend_pair(resolution=6)
    params = RegistrationParams(max_outer_iters=8)
    a = generate_keynodes(source, target, 6, params, seed=42)
    b = generate_keynodes(source, target, 6, params, seed=42)
    np.testing.assert_array_equal(a.anchor_indices, b.anchor_indices)
    np.testing.assert_array_equal(a.graph_edges, b.graph_edges)


def test_generate_single_node_handles_pure_translation(rng):
    source = random_blob_mesh(rng, num_points=30)
    target = Mesh(source.positions + [0.05, 0.02, -0.04], source.faces)
    params = RegistrationParams(max_outer_iters=60)
    nodes = generate_keynodes(source, target, 1, params, seed=1)
    assert nodes.count == 1
    weights = compute_influence_weights(source.positions, nodes.node_positions, 1)
    report = extract_transforms(source, target, nodes, weights, params)
    assert report.loss_trace[-1][1] < 1e-10


def test_more_nodes_never_worse_after_resolve():
    source, target = _bend_pair(resolution=9)
    params = RegistrationParams(max_outer_iters=25)

    def final_data_loss(n):
        nodes = generate_keynodes(source, target, n, params, seed=3)
        weights = compute_influence_weights(
            source.positions, nodes.node_positions, min(4, nodes.count))
        report = extract_transforms(source, target, nodes, weights, params)
        return report.loss_trace[-1][1]

    assert final_data_loss(20) <= final_data_loss(5)


def test_generate_rejects_bad_target_count(rng):
    source = random_blob_mesh(rng)
    with pytest.raises(ValueError):
        generate_keynodes(source, source, source.num_vertices + 1,
                          RegistrationParams(), seed=0)
