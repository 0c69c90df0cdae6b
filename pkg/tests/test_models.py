import numpy as np
import pytest

from mmaudio.exceptions import InvalidConfigError, SpecError
from mmaudio.models import (
    PAPER_PARAMETERS,
    VARIANTS,
    LayerSpec,
    Network,
    NetworkSpec,
    build_variant,
    count_flops,
    count_parameters,
    infer_shapes,
    table_rows,
)

TABLE_1 = [
    ("Convolution with BN", "3*3*64"),
    ("Max Pooling", "2*2"),
    ("Convolution with BN", "3*3*128"),
    ("Max Pooling", "2*2"),
    ("Convolution with BN", "[3*3, 256]*2"),
    ("Max Pooling", "2*2"),
    ("Convolution with BN", "[3*3, 512]*2"),
    ("Max Pooling", "2*2"),
    ("Convolution with BN", "6*4*4096"),
    ("Convolution with BN", "1*1*4096"),
    ("Convolution with BN", "1*1*128"),
    ("Fully-connected-10998", None),
    ("Sigmoid", None),
]


def table_arithmetic():
    """Trainable values of the published layer table, computed by hand."""
    convs = [(3, 3, 1, 64), (3, 3, 64, 128), (3, 3, 128, 256), (3, 3, 256, 256), (3, 3, 256, 512),
             (3, 3, 512, 512), (6, 4, 512, 4096), (1, 1, 4096, 4096), (1, 1, 4096, 128)]
    weights = sum(kh * kw * cin * cout for kh, kw, cin, cout in convs) + 128 * 10998
    biases = sum(c[3] for c in convs) + 10998
    bn = sum(2 * c[3] for c in convs)
    return weights, weights + biases + bn


def test_parameter_count_matches_arithmetic_and_reported_value():
    weights, total = table_arithmetic()
    assert weights == 73_538_880  # kernels alone, about 73.539M
    assert count_parameters(build_variant("vggish_fullconv")) == total == 73_580_022
    assert abs(total - PAPER_PARAMETERS) / PAPER_PARAMETERS <= 0.001


def test_dense_head_count():
    spec = NetworkSpec("head", (LayerSpec("flatten", "f"), LayerSpec("dense", "d", units=10998)), input_shape=(128,))
    assert count_parameters(spec) == 1_418_742


def test_empty_spec_has_no_parameters():
    assert count_parameters(NetworkSpec("empty", (), input_shape=(4,))) == 0


def test_fullconv_rows_match_table():
    assert table_rows(build_variant("vggish_fullconv")) == TABLE_1


def test_fullconv_shape_chain():
    shapes = infer_shapes(build_variant("vggish_fullconv"))
    assert shapes["conv1"] == (100, 64, 64)
    assert [shapes[p][:2] for p in ("pool1", "pool2", "pool3", "pool4")] == [(50, 32), (25, 16), (12, 8), (6, 4)]
    assert shapes["pool4"] == (6, 4, 512)
    assert shapes["fc1"] == (1, 1, 4096)
    assert shapes["embedding_bn"] == (1, 1, 128)
    assert shapes["output"] == (10998,)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_end_in_dense_sigmoid(variant):
    spec = build_variant(variant)
    assert spec.layers[-2].kind == "dense" and spec.layers[-2].units == 10998
    assert spec.layers[-1].kind == "sigmoid"
    assert infer_shapes(spec)[spec.embedding_layer][-1] == 128


def test_base_has_no_batchnorm():
    assert not [l for l in build_variant("vggish_base").layers if l.kind == "batchnorm"]


def test_layer_diff_between_variants():
    base, bn, full = (build_variant(v) for v in VARIANTS)
    base_names = [l.name for l in base.layers]
    bn_names = [l.name for l in bn.layers]
    added = [n for n in bn_names if n not in base_names]
    assert added == [f"{l.name}_bn" for l in base.layers if l.kind in ("conv2d",)]
    assert [n for n in bn_names if n not in added] == base_names
    trunk = bn_names[: bn_names.index("pool4") + 1]
    assert [l.name for l in full.layers][: len(trunk)] == trunk
    assert bn.layers[: len(trunk)] == full.layers[: len(trunk)]
    head = [(l.kind, l.kernel, l.padding) for l in full.layers[len(trunk):] if l.kind == "conv2d"]
    assert head == [("conv2d", (6, 4, 4096), "valid"), ("conv2d", (1, 1, 4096), "valid"), ("conv2d", (1, 1, 128), "valid")]


def test_counts_for_all_variants():
    assert count_parameters(build_variant("vggish_base")) == 73_559_926
    assert count_parameters(build_variant("vggish_bn")) == 73_563_382
    # gamma and beta for every trunk conv
    assert 73_563_382 - 73_559_926 == 2 * (64 + 128 + 256 * 2 + 512 * 2)


def test_flop_single_conv_example():
    spec = NetworkSpec("one", (LayerSpec("conv2d", "c", kernel=(3, 3, 1), padding="valid"),), input_shape=(4, 4, 1))
    assert count_flops(spec).total == 36
    assert count_flops(spec, "mul_plus_add").total == 72


def test_flops_linear_in_height():
    layers = (LayerSpec("conv2d", "a", kernel=(3, 3, 4)), LayerSpec("conv2d", "b", kernel=(3, 3, 2)))
    small = count_flops(NetworkSpec("s", layers, input_shape=(8, 6, 1)))
    big = count_flops(NetworkSpec("b", layers, input_shape=(16, 6, 1)))
    assert [2 * c for _, c in small.rows] == [c for _, c in big.rows]


def test_fullconv_flops_reported_with_both_conventions():
    spec = build_variant("vggish_fullconv")
    mac = count_flops(spec).total
    # hand sum: trunk convs at their spatial sizes plus the head
    trunk = (100 * 64 * 9 * 1 * 64 + 50 * 32 * 9 * 64 * 128 + 25 * 16 * 9 * (128 * 256 + 256 * 256)
             + 12 * 8 * 9 * (256 * 512 + 512 * 512))
    head = 6 * 4 * 512 * 4096 + 4096 * 4096 + 4096 * 128 + 128 * 10998
    assert mac == trunk + head == 884_325_120
    assert count_flops(spec, "mul_plus_add").total == 2 * mac


def test_shape_error_names_layer():
    spec = NetworkSpec("bad", (LayerSpec("conv2d", "too_big", kernel=(7, 7, 2), padding="valid"),), input_shape=(4, 4, 1))
    with pytest.raises(SpecError, match="too_big"):
        infer_shapes(spec)


def test_unknown_variant():
    with pytest.raises(InvalidConfigError):
        build_variant("resnet50")


@pytest.mark.parametrize("variant", VARIANTS)
def test_realized_shapes_and_counts_tiny(variant):
    spec = build_variant(variant, width_divisor=16)
    net = Network(spec, seed=0)
    assert net.n_parameters == count_parameters(spec)
    x = np.random.default_rng(0).standard_normal((2, 100, 64, 1)).astype(np.float32)
    shapes = infer_shapes(spec)
    for layer in spec.layers:
        out = net.forward(x, mode="infer", until=layer.name)
        assert out.shape[1:] == shapes[layer.name], layer.name


@pytest.mark.parametrize("variant", VARIANTS)
def test_realized_full_size(variant):
    spec = build_variant(variant)
    net = Network(spec, seed=0)
    assert net.n_parameters == count_parameters(spec)
    x = np.zeros((1, 100, 64), np.float32)
    emb = net.embed(x)
    assert emb.shape == (1, 128)
    assert net.predict_proba(x).shape == (1, 10998)


def test_describe_golden(capsys):
    from pathlib import Path

    from mmaudio.models import describe

    golden = Path(__file__).parent / "golden"
    assert describe(build_variant("vggish_fullconv")) == (golden / "describe_vggish_fullconv.txt").read_text()
    assert describe(build_variant("vggish_base", width_divisor=8)) == (golden / "describe_vggish_base_w8.txt").read_text()
