import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minmax_routing import env
from minmax_routing.errors import InvalidTransformError, ParseError, UnsupportedFormatError
from minmax_routing.instances import (
    NUM_DIHEDRAL,
    GeometricTransform,
    Instance,
    TaskKind,
    TransformKind,
    apply_transform,
    dihedral_transform,
    generate_uniform,
    instance_from_dict,
    instance_to_dict,
    load_instance,
    parse_tsplib,
    save_instance,
    to_routing_instance,
)

TSPLIB_SMALL = """NAME: tiny
TYPE: TSP
DIMENSION: 2
EDGE_WEIGHT_TYPE: EUC_2D
NODE_COORD_SECTION
1 0.0 0.0
2 3.0 4.0
EOF
"""


class TestGenerateUniform:
    def test_basic_shape_and_range(self):
        inst = generate_uniform(TaskKind.MTSP, 5, 2, 7)
        assert inst.n == 5 and inst.m == 2
        assert inst.all_coords.shape == (7, 2)
        assert inst.in_unit_square()
        assert inst.has_shared_depot()

    def test_mpdp_pairing(self):
        inst = generate_uniform(TaskKind.MPDP, 4, 2, 1)
        assert inst.num_pairs == 2
        assert inst.is_pickup(1) and inst.is_pickup(2)
        assert inst.delivery_of(1) == 3 and inst.delivery_of(2) == 4
        assert inst.pickup_of(4) == 2

    def test_mpdp_odd_rejected(self):
        with pytest.raises(ValueError):
            generate_uniform(TaskKind.MPDP, 5, 2, 0)

    def test_paper_scale_ratio(self):
        inst = generate_uniform(TaskKind.MTSP, 200, 10, 0)
        assert 10 <= inst.n / inst.m <= 20

    def test_bit_reproducible(self):
        a = generate_uniform(TaskKind.MTSP, 30, 3, 42)
        b = generate_uniform(TaskKind.MTSP, 30, 3, 42)
        assert np.array_equal(a.city_coords, b.city_coords)
        assert np.array_equal(a.depot_coords, b.depot_coords)
        c = generate_uniform(TaskKind.MTSP, 30, 3, 43)
        assert not np.array_equal(a.city_coords, c.city_coords)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            generate_uniform(TaskKind.MTSP, 0, 1, 0)
        with pytest.raises(ValueError):
            generate_uniform(TaskKind.MTSP, 3, 0, 0)


class TestParseTsplib:
    def test_happy_path(self):
        rows = parse_tsplib(TSPLIB_SMALL)
        assert rows == [(1, 0.0, 0.0), (2, 3.0, 4.0)]

    def test_explicit_weight_type_rejected(self):
        text = TSPLIB_SMALL.replace("EUC_2D", "EXPLICIT")
        with pytest.raises(UnsupportedFormatError):
            parse_tsplib(text)

    def test_malformed_row_reports_line(self):
        text = TSPLIB_SMALL.replace("2 3.0 4.0", "2 3.0")
        with pytest.raises(ParseError, match=r"line 7"):
            parse_tsplib(text)

    def test_dimension_mismatch(self):
        text = TSPLIB_SMALL.replace("DIMENSION: 2", "DIMENSION: 3")
        with pytest.raises(ParseError, match="DIMENSION"):
            parse_tsplib(text)

    def test_missing_headers(self):
        with pytest.raises(ParseError):
            parse_tsplib("NODE_COORD_SECTION\n1 0 0\nEOF\n")

    def test_spacing_variants(self):
        text = TSPLIB_SMALL.replace("DIMENSION: 2", "DIMENSION : 2")
        assert len(parse_tsplib(text)) == 2

    def test_benchmark_scale_file(self):
        # Same shape as the classic 280-node benchmark instance.
        rng = np.random.default_rng(0)
        rows = "\n".join(
            f"{i + 1} {x:.1f} {y:.1f}"
            for i, (x, y) in enumerate(rng.uniform(0, 300, size=(280, 2)))
        )
        text = (
            "NAME: a280-like\nDIMENSION: 280\nEDGE_WEIGHT_TYPE: EUC_2D\n"
            f"NODE_COORD_SECTION\n{rows}\nEOF\n"
        )
        parsed = parse_tsplib(text)
        assert len(parsed) == 280
        inst = to_routing_instance([(x, y) for _, x, y in parsed], 10)
        assert inst.n == 279 and inst.m == 10
        assert inst.in_unit_square()


class TestToRoutingInstance:
    def test_normalization_example(self):
        inst = to_routing_instance([(0, 0), (10, 0), (0, 10)], 2)
        assert inst.scale_factor == 10
        assert np.allclose(inst.depot_coords, [[0, 0], [0, 0]])
        assert np.allclose(inst.city_coords, [[1, 0], [0, 1]])

    def test_single_coordinate_rejected(self):
        with pytest.raises(ValueError):
            to_routing_instance([(0, 0)], 2)

    def test_agent_count_validated(self):
        with pytest.raises(ValueError):
            to_routing_instance([(0, 0), (1, 1)], 0)

    def test_denormalization_recovers_distances(self):
        rng = np.random.default_rng(3)
        raw = rng.uniform(-50, 120, size=(12, 2))
        inst = to_routing_instance(raw, 3)
        orig = np.linalg.norm(raw[:, None] - raw[None, :], axis=2)
        norm_pts = np.concatenate([inst.depot_coords[:1], inst.city_coords])
        rec = np.linalg.norm(norm_pts[:, None] - norm_pts[None, :], axis=2) * inst.scale_factor
        assert np.allclose(orig, rec, rtol=1e-9, atol=1e-9)

    def test_aspect_ratio_preserved(self):
        inst = to_routing_instance([(0, 0), (10, 0), (0, 2)], 1)
        assert np.allclose(inst.city_coords, [[1.0, 0.0], [0.0, 0.2]])


class TestTransforms:
    def test_identity_dihedral(self):
        inst = generate_uniform(TaskKind.MTSP, 6, 2, 0)
        out = apply_transform(inst, dihedral_transform(0))
        assert np.array_equal(out.city_coords, inst.city_coords)

    def test_point_reflection_rotation_pi(self):
        t = GeometricTransform(TransformKind.ROTATION, math.pi)
        mapped = t.apply_points(np.array([[0.2, 0.3]]))
        assert np.allclose(mapped, [[0.8, 0.7]], atol=1e-12)

    def test_diagonal_swap(self):
        t = GeometricTransform(TransformKind.DIHEDRAL, 4)
        mapped = t.apply_points(np.array([[0.2, 0.7]]))
        assert np.allclose(mapped, [[0.7, 0.2]], atol=1e-15)

    def test_rotation_off_center_pivot_rejected(self):
        inst = generate_uniform(TaskKind.MTSP, 12, 2, 5)
        bad = GeometricTransform(TransformKind.ROTATION, math.pi / 2, pivot=(0.0, 0.0))
        with pytest.raises(InvalidTransformError):
            apply_transform(inst, bad)

    def test_non_strict_allows_out_of_square(self):
        inst = generate_uniform(TaskKind.MTSP, 12, 2, 5)
        t = GeometricTransform(TransformKind.ROTATION, 0.7)
        out = apply_transform(inst, t, strict=False)
        assert out.n == inst.n

    def test_dihedral_index_validated(self):
        with pytest.raises(ValueError):
            GeometricTransform(TransformKind.DIHEDRAL, 8)

    @given(st.integers(0, NUM_DIHEDRAL - 1), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_dihedral_preserves_distances(self, idx, seed):
        inst = generate_uniform(TaskKind.MTSP, 8, 2, seed)
        out = apply_transform(inst, dihedral_transform(idx))
        orig = np.linalg.norm(
            inst.all_coords[:, None] - inst.all_coords[None, :], axis=2
        )
        new = np.linalg.norm(out.all_coords[:, None] - out.all_coords[None, :], axis=2)
        assert np.allclose(orig, new, atol=1e-12)

    @given(st.integers(0, NUM_DIHEDRAL - 1))
    @settings(max_examples=8, deadline=None)
    def test_dihedral_inverse_roundtrip(self, idx):
        pts = np.random.default_rng(idx).random((20, 2))
        t = dihedral_transform(idx)
        back = t.inverse().apply_points(t.apply_points(pts))
        assert np.allclose(back, pts, atol=1e-12)

    @given(st.floats(0, 2 * math.pi, allow_nan=False))
    @settings(max_examples=20, deadline=None)
    def test_rotation_inverse_roundtrip(self, angle):
        pts = np.random.default_rng(1).random((10, 2))
        t = GeometricTransform(TransformKind.ROTATION, angle)
        back = t.inverse().apply_points(t.apply_points(pts))
        assert np.allclose(back, pts, atol=1e-12)

    def test_cost_invariance_with_fixed_solution(self):
        from minmax_routing.oracles import random_policy

        inst = generate_uniform(TaskKind.MTSP, 7, 2, 11)
        sol = random_policy(inst, np.random.default_rng(0))
        base = env.minmax_cost(sol, inst)
        for idx in range(NUM_DIHEDRAL):
            out = apply_transform(inst, dihedral_transform(idx))
            assert abs(env.minmax_cost(sol, out) - base) < 1e-9


class TestInstanceIO:
    def test_json_roundtrip(self, tmp_path):
        inst = generate_uniform(TaskKind.MPDP, 6, 3, 9)
        path = save_instance(inst, tmp_path / "i.json")
        loaded = load_instance(path)
        assert loaded.task_kind == inst.task_kind
        assert loaded.id == inst.id
        assert np.allclose(loaded.city_coords, inst.city_coords)
        assert np.allclose(loaded.depot_coords, inst.depot_coords)
        assert loaded.scale_factor == inst.scale_factor

    def test_fixed_field_names(self):
        inst = generate_uniform(TaskKind.MTSP, 3, 2, 0)
        doc = instance_to_dict(inst)
        assert set(doc) == {"task", "n", "m", "cities", "depot", "scale_factor", "id"}
        assert doc["task"] == "mtsp"
        assert doc["n"] == 3 and doc["m"] == 2
        assert len(doc["cities"]) == 3 and len(doc["depot"]) == 2

    def test_bad_document_rejected(self):
        with pytest.raises(ParseError):
            instance_from_dict({"task": "mtsp", "n": 2})

    def test_distinct_depots_not_serializable(self):
        inst = Instance(
            task_kind=TaskKind.MTSP,
            city_coords=[[0.1, 0.1]],
            depot_coords=[[0.0, 0.0], [1.0, 1.0]],
        )
        with pytest.raises(ValueError):
            instance_to_dict(inst)


class TestInstanceInvariants:
    def test_scale_factor_positive(self):
        with pytest.raises(ValueError):
            Instance(TaskKind.MTSP, [[0.5, 0.5]], [[0.1, 0.1]], scale_factor=0.0)

    def test_mpdp_even(self):
        with pytest.raises(ValueError):
            Instance(TaskKind.MPDP, [[0.5, 0.5]], [[0.1, 0.1]])

    def test_coords_read_only(self):
        inst = generate_uniform(TaskKind.MTSP, 3, 1, 0)
        with pytest.raises(ValueError):
            inst.city_coords[0, 0] = 5.0
