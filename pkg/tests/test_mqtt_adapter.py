from types import SimpleNamespace

import pytest

from app.errors import TopicValidationError, TransportError
from app.mqtt_adapter import MqttBroker


@pytest.fixture
def adapter():
    # never connected: paho just reports "no connection" for (un)subscribe calls
    a = MqttBroker("unit", "127.0.0.1", 1)
    yield a
    a.shutdown()


def _msg(topic, payload):
    return SimpleNamespace(topic=topic, payload=payload)


def test_messages_routed_by_local_filter_match(adapter, recorder):
    other = []
    adapter.subscribe("sdflmq/global/+/root_result", recorder, endpoint="ps")
    adapter.subscribe("sdflmq/client/c1/#", lambda t, p: other.append(t), endpoint="c1")

    adapter._on_message(None, None, _msg("sdflmq/global/s1/root_result", b"x"))
    adapter._on_message(None, None, _msg("sdflmq/client/c1/assign_role", b"y"))
    adapter._on_message(None, None, _msg("sdflmq/coord/join_fl_session", b"z"))

    assert recorder.calls == [("sdflmq/global/s1/root_result", b"x")]
    assert other == ["sdflmq/client/c1/assign_role"]


def test_handler_failure_does_not_block_others(adapter, recorder):
    def boom(topic, payload):
        raise RuntimeError("handler bug")

    adapter.subscribe("a/b", boom, endpoint="e1")
    adapter.subscribe("a/+", recorder, endpoint="e2")
    adapter._on_message(None, None, _msg("a/b", bytearray(b"p")))
    assert recorder.calls == [("a/b", b"p")]


def test_subscription_bookkeeping(adapter):
    first = adapter.subscribe("x/#", lambda t, p: None, endpoint="e1")
    assert adapter.subscribe("x/#", lambda t, p: None, endpoint="e1") == first
    second = adapter.subscribe("x/#", lambda t, p: None, endpoint="e2")
    assert adapter.subscriptions() == [("e1", "x/#"), ("e2", "x/#")]
    assert adapter.subscriptions("e2") == [("e2", "x/#")]
    assert adapter.unsubscribe(second)
    assert not adapter.unsubscribe(second)
    assert adapter.subscriptions() == [("e1", "x/#")]


def test_invalid_topics_rejected(adapter):
    with pytest.raises(TopicValidationError):
        adapter.subscribe("a/#/b", lambda t, p: None)
    with pytest.raises(TopicValidationError):
        adapter.publish("a/+", b"")


def test_unreachable_broker_is_transport_error():
    with pytest.raises(TransportError):
        MqttBroker("unit", "127.0.0.1", 1).connect(timeout=1.0)
