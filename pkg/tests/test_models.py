import numpy as np
import pytest
import torch

from fedcrop.data import ImageSet, PoisonSpec, TriggerPattern
from fedcrop.models import (
    ModelSpec,
    ParameterVector,
    TrainConfig,
    TrainingDivergedError,
    backdoor_accuracy,
    build_model,
    constant_classifier,
    default_feature_slice,
    evaluate,
    flatten_params,
    init_params,
    local_train,
    materialize,
    predict,
    unflatten_params,
)


def test_registry_unknown_name():
    with pytest.raises(KeyError):
        build_model(ModelSpec("vgg"))


@pytest.mark.parametrize("name,size", [("smallcnn", 16), ("smallcnn", 32), ("resnet18-lite", 16)])
def test_forward_shapes(name, size):
    spec = ModelSpec(name, 3, size, 10)
    model = build_model(spec, seed=0)
    out = model(torch.zeros(2, 3, size, size))
    assert out.shape == (2, 10)


def test_resnet_has_no_pooling_layers():
    model = build_model(ModelSpec("resnet18-lite", 3, 16, 10), seed=0)
    kinds = {type(m).__name__ for m in model.modules()}
    assert not any("Pool" in k for k in kinds)
    convs = [m for m in model.modules() if isinstance(m, torch.nn.Conv2d) and m.kernel_size == (3, 3)]
    assert len(convs) == 17


def test_codec_roundtrip_bit_exact(spec16):
    vec = init_params(spec16, 3)
    model = materialize(vec)
    again = flatten_params(model)
    assert again.values.tobytes() == vec.values.tobytes()
    assert again.layout == vec.layout


def test_init_is_seeded(spec16):
    assert np.array_equal(init_params(spec16, 1).values, init_params(spec16, 1).values)
    assert not np.array_equal(init_params(spec16, 1).values, init_params(spec16, 2).values)


def test_layout_mismatch_rejected(spec16):
    vec = init_params(spec16, 0)
    other = build_model(ModelSpec("smallcnn", 3, 32, 10))
    with pytest.raises(ValueError):
        unflatten_params(vec, other)


def test_parameter_vector_length_checked():
    with pytest.raises(ValueError):
        ParameterVector(np.zeros(5), [("a", (2, 2))])


def test_select_and_slices(spec16):
    vec = init_params(spec16, 0)
    names = default_feature_slice(vec.layout)
    assert names == ["conv1.weight", "conv1.bias", "fc2.weight", "fc2.bias"]
    sel = vec.select(names)
    assert len(sel) == 16 * 3 * 9 + 16 + 10 * 128 + 10
    with pytest.raises(KeyError):
        vec.select(["nope"])


def test_local_train_deterministic_and_learns(tiny_data, spec16):
    train, test = tiny_data
    start = init_params(spec16, 0)
    cfg = TrainConfig(learning_rate=0.1, epochs=3, seed=5)
    log_a = []
    a = local_train(start, train, cfg, log_a)
    b = local_train(start, train, cfg)
    assert a.values.tobytes() == b.values.tobytes()
    assert log_a[-1] < log_a[0]
    assert evaluate(a, test) > 0.3
    assert a.layout == start.layout


def test_local_train_zero_epochs_is_copy(tiny_data, spec16):
    start = init_params(spec16, 0)
    out = local_train(start, tiny_data[0], TrainConfig(epochs=0))
    assert np.array_equal(out.values, start.values)
    assert out.values is not start.values


def test_local_train_divergence_raises(tiny_data, spec16):
    with pytest.raises(TrainingDivergedError):
        local_train(init_params(spec16, 0), tiny_data[0], TrainConfig(learning_rate=1e6, epochs=2))


def test_local_train_empty_dataset(spec16):
    empty = ImageSet(np.zeros((0, 3, 16, 16)), np.zeros(0))
    with pytest.raises(ValueError):
        local_train(init_params(spec16, 0), empty, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_constant_classifier_oracle(tiny_data, spec16):
    _, test = tiny_data
    const = constant_classifier(spec16, 3)
    assert np.all(predict(const, test.x) == 3)
    assert evaluate(const, test) == pytest.approx(np.mean(test.y == 3))
    spec = PoisonSpec(TriggerPattern.patch((3, 16, 16)), target_label=3, fraction=0.1)
    assert backdoor_accuracy(const, test, spec) == 1.0
    spec_other = PoisonSpec(spec.trigger, target_label=4, fraction=0.1)
    assert backdoor_accuracy(const, test, spec_other) == 0.0


def test_backdoor_accuracy_all_target_rejected(spec16):
    ds = ImageSet(np.zeros((4, 3, 16, 16)), np.zeros(4, dtype=int))
    spec = PoisonSpec(TriggerPattern.patch((3, 16, 16)), 0, 0.1)
    with pytest.raises(ValueError):
        backdoor_accuracy(init_params(spec16, 0), ds, spec)


def test_evaluate_empty(spec16):
    with pytest.raises(ValueError):
        evaluate(init_params(spec16, 0), ImageSet(np.zeros((0, 3, 16, 16)), np.zeros(0)))
