import numpy as np
import pytest

from errors import (
    AdapterPreconditionError,
    ConfigError,
    ContextLengthError,
    DomainError,
    ExtractionAbortedError,
    NotFoundError,
    StoreMismatchError,
)
from model_bridge import (
    ActivationRecord,
    ActivationStore,
    AdapterConfig,
    ExtractionStyle,
    HFAdapter,
    SamplingParams,
    StubAdapter,
    extract_dataset,
    load_adapter,
    make_random_control,
    payload_mean,
    store_key_for,
)
from prompting import assemble_prompt, parse_answer
from represent import Modality, RenderConfig, Representation, SerializationConfig


def _bundle(template, text="0 2 0 , 0 2 0"):
    return assemble_prompt(Representation(Modality.D, text=text), template, sample_id="s")


def test_sampling_params_validation():
    with pytest.raises(DomainError):
        SamplingParams(n=2)
    with pytest.raises(DomainError):
        SamplingParams(top_p=0.0)
    with pytest.raises(DomainError):
        SamplingParams(temperature=-1.0)
    params = SamplingParams.sampled(n=5, seed=3)
    assert (params.n, params.seed, params.temperature) == (5, 3, 0.7)
    assert SamplingParams.from_dict(params.to_dict()) == params


def test_payload_mean_reads_digit_tokens(template):
    assert payload_mean(_bundle(template, "0 2 0 , 9 8 0").user_text) == 500.0
    assert payload_mean("no payload here") == 0.0


def test_stub_generation_is_deterministic(template, stub_adapter):
    bundle = _bundle(template)
    assert stub_adapter.generate(bundle) == stub_adapter.generate(bundle)
    draws = stub_adapter.generate(bundle, SamplingParams.sampled(n=20, seed=1))
    assert len(draws) == 20
    assert all(not parse_answer(d, ["A", "B"]).failed for d in draws)
    assert draws == stub_adapter.generate(bundle, SamplingParams.sampled(n=20, seed=1))


def test_stub_answer_fn_override(template):
    adapter = StubAdapter(AdapterConfig(name="stub"), answer_fn=lambda bundle, params, draw: "The answer is [B] high")
    assert adapter.generate(_bundle(template), SamplingParams.sampled(n=3)) == ["The answer is [B] high"] * 3


def test_stub_hidden_states_shape_and_signal(template, stub_adapter):
    low = stub_adapter.hidden_states(_bundle(template, "0 2 0 , 0 2 0"))
    high = stub_adapter.hidden_states(_bundle(template, "9 8 0 , 9 8 0"))
    assert low.matrix.shape == (3, 8)
    assert low.extraction_style == ExtractionStyle.PREFILL
    assert high.matrix[1, 0] - low.matrix[1, 0] > 900
    again = stub_adapter.hidden_states(_bundle(template, "0 2 0 , 0 2 0"))
    assert np.array_equal(low.matrix, again.matrix)


def test_stub_layer_count_from_options(template):
    adapter = load_adapter(AdapterConfig(name="deep", options={"num_layers": 4, "hidden_dim": 6}))
    assert adapter.hidden_states(_bundle(template)).matrix.shape == (5, 6)


def test_post_cot_extraction_differs_from_prefill(template, stub_adapter):
    bundle = _bundle(template.with_style("cot", 0))
    prefill = stub_adapter.hidden_states(bundle, ExtractionStyle.PREFILL)
    post = stub_adapter.hidden_states(bundle, ExtractionStyle.POST_COT)
    assert post.extraction_style == ExtractionStyle.POST_COT
    assert not np.array_equal(prefill.matrix, post.matrix)


def test_text_only_adapter_refuses_images(template):
    adapter = StubAdapter(AdapterConfig(name="textonly", supports_images=False))
    bundle = assemble_prompt(Representation(Modality.V, images=(b"png",)), template)
    with pytest.raises(AdapterPreconditionError):
        adapter.generate(bundle)
    with pytest.raises(AdapterPreconditionError):
        adapter.hidden_states(bundle)


def test_context_limit(template):
    adapter = StubAdapter(AdapterConfig(name="tiny", max_context=5))
    with pytest.raises(ContextLengthError):
        adapter.generate(_bundle(template))


def test_random_control_carries_no_signal(template, stub_adapter):
    control = make_random_control(stub_adapter, seed=3, signal_fn=lambda bundle: 1000.0)
    assert control.name == "stub-random"
    assert control.version == "stub:stub-random:random-3"
    assert stub_adapter.version == "stub:stub:pretrained"
    assert (control.num_layers, control.hidden_dim) == (stub_adapter.num_layers, stub_adapter.hidden_dim)
    assert abs(control.hidden_states(_bundle(template)).matrix[1, 0]) < 100


def test_random_control_goes_through_factory(stub_adapter):
    built = []

    def factory(cfg):
        built.append(cfg)
        return StubAdapter(cfg)

    make_random_control(stub_adapter.config, seed=1, factory=factory)
    assert built[0].pretrained is False and built[0].seed == 1


def test_unknown_backend_and_missing_model_id():
    with pytest.raises(ConfigError):
        load_adapter(AdapterConfig(name="x", backend="onnx"))
    with pytest.raises(ConfigError):
        HFAdapter(AdapterConfig(name="x", backend="hf"))


def test_activation_record_rejects_non_finite():
    from errors import BackendError

    with pytest.raises(BackendError):
        ActivationRecord("s", "h", np.array([[np.nan, 0.0]]), ExtractionStyle.PREFILL)


def _store(tmp_path, ds, template, adapter):
    key = store_key_for(adapter, ds, "d", template, ExtractionStyle.PREFILL)
    return ActivationStore(tmp_path, key)


def test_activation_store_put_and_get(tmp_path, toy_datasets, template, stub_adapter):
    store = _store(tmp_path, toy_datasets["test"], template, stub_adapter)
    record = ActivationRecord("a", "h1", np.ones((3, 8)), ExtractionStyle.PREFILL)
    assert store.put(record) is True
    assert store.put(record) is False
    loaded = store.get("a")
    assert np.array_equal(loaded.matrix, record.matrix)
    assert loaded.prompt_hash == "h1"
    assert store.shape == (3, 8)

    with pytest.raises(StoreMismatchError):
        store.put(ActivationRecord("b", "h2", np.ones((2, 8)), ExtractionStyle.PREFILL))
    with pytest.raises(NotFoundError):
        store.get("missing")
    assert store.features([]).shape == (0, 3, 8)


def test_extract_dataset_fills_and_resumes(tmp_path, toy_datasets, template, stub_adapter, monkeypatch):
    test = toy_datasets["test"]
    store = extract_dataset(test, "d", template, stub_adapter, _store(tmp_path, test, template, stub_adapter))
    assert sorted(store.sample_ids) == sorted(test.sample_ids)
    features = store.features(test.sample_ids)
    assert features.shape == (10, 3, 8)
    high = [i for i, sid in enumerate(test.sample_ids) if "high" in sid]
    low = [i for i, sid in enumerate(test.sample_ids) if "low" in sid]
    assert features[high, 1, 0].min() > features[low, 1, 0].max()

    def fail(*args, **kwargs):
        raise AssertionError("nothing should be recomputed")

    monkeypatch.setattr(stub_adapter, "hidden_states", fail)
    reopened = _store(tmp_path, test, template, stub_adapter)
    extract_dataset(test, "d", template, stub_adapter, reopened)
    assert np.array_equal(reopened.features(test.sample_ids), features)


def test_extract_dataset_rejects_foreign_store(tmp_path, toy_datasets, template, stub_adapter):
    train_store = _store(tmp_path, toy_datasets["train"], template, stub_adapter)
    with pytest.raises(StoreMismatchError):
        extract_dataset(toy_datasets["test"], "d", template, stub_adapter, train_store)


def test_skip_budget(tmp_path, toy_datasets, template):
    adapter = StubAdapter(AdapterConfig(name="tiny", max_context=5))
    test = toy_datasets["test"]
    with pytest.raises(ExtractionAbortedError):
        extract_dataset(test, "d", template, adapter, _store(tmp_path, test, template, adapter), max_skip_fraction=0.05)

    lenient = _store(tmp_path / "lenient", test, template, adapter)
    extract_dataset(test, "d", template, adapter, lenient, max_skip_fraction=1.0)
    assert len(lenient) == 0
    assert len(lenient.skips) == 10
    assert all(reason.startswith("ContextLengthError") for reason in lenient.skips.values())


def test_controls_with_one_seed_agree_and_differ_from_pretrained(template, stub_adapter):
    bundle = _bundle(template)
    first = make_random_control(stub_adapter, seed=7).hidden_states(bundle).matrix
    second = make_random_control(stub_adapter, seed=7).hidden_states(bundle).matrix
    assert np.array_equal(first, second)
    assert (first != stub_adapter.hidden_states(bundle).matrix).any()


class OverflowOn(StubAdapter):
    """Stub that overflows its context on the listed sample ids."""

    def __init__(self, cfg, sample_ids):
        super().__init__(cfg)
        self.sample_ids = set(sample_ids)

    def hidden_states(self, bundle, style=ExtractionStyle.PREFILL):
        if bundle.provenance["sample_id"] in self.sample_ids:
            raise ContextLengthError(f"{bundle.provenance['sample_id']} does not fit")
        return super().hidden_states(bundle, style)


def test_earlier_skips_count_against_a_resumed_run(tmp_path, toy_datasets, template, stub_adapter):
    test = toy_datasets["test"]
    first = test.sample_ids[0]
    store = _store(tmp_path, test, template, stub_adapter)
    with pytest.raises(ExtractionAbortedError):
        extract_dataset(test, "d", template, OverflowOn(stub_adapter.config, [first]), store, max_skip_fraction=0.05)

    resumed = _store(tmp_path, test, template, stub_adapter)
    assert resumed.skips.keys() == {first}
    with pytest.raises(ExtractionAbortedError):
        extract_dataset(test, "d", template, stub_adapter, resumed, max_skip_fraction=0.05)
    assert len(resumed) == 0

    extract_dataset(test, "d", template, stub_adapter, resumed, max_skip_fraction=0.1)
    assert len(resumed) == 9


def test_store_key_follows_representation_settings(toy_datasets, template, stub_adapter):
    test = toy_datasets["test"]
    base = store_key_for(stub_adapter, test, "d", template, ExtractionStyle.PREFILL)
    coarse = store_key_for(stub_adapter, test, "d", template, ExtractionStyle.PREFILL, SerializationConfig(precision=0))
    assert coarse.digest() != base.digest()
    small = RenderConfig(dpi=20)
    assert store_key_for(stub_adapter, test, "d", template, ExtractionStyle.PREFILL, render_config=small) == base
    image = store_key_for(stub_adapter, test, "v", template, ExtractionStyle.PREFILL)
    assert store_key_for(stub_adapter, test, "v", template, ExtractionStyle.PREFILL, render_config=small) != image


def test_extraction_rejects_a_store_keyed_for_other_settings(tmp_path, toy_datasets, template, stub_adapter):
    test = toy_datasets["test"]
    store = _store(tmp_path, test, template, stub_adapter)
    with pytest.raises(StoreMismatchError):
        extract_dataset(test, "d", template, stub_adapter, store, SerializationConfig(precision=0))
