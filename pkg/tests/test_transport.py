import threading

import pytest

from app.errors import TopicValidationError, TransportError
from app.transport import InMemoryBroker, LatencyModel, bridge_link, topic_matches, validate_filter, validate_topic


@pytest.mark.parametrize(
    "topic_filter, topic, expected",
    [
        ("a/b/c", "a/b/c", True),
        ("a/+/c", "a/b/c", True),
        ("a/+/c", "a/b/d", False),
        ("a/#", "a", True),
        ("a/#", "a/b/c", True),
        ("#", "a/b", True),
        ("#", "/", True),
        ("#", "$SYS/broker/load", False),
        ("+/broker/load", "$SYS/broker/load", False),
        ("$SYS/#", "$SYS/broker/load", True),
        ("$SYS/+", "$SYS/a", True),
        ("+", "a", True),
        ("+", "a/b", False),
        ("+", "/", False),
        ("+/+", "/a", True),
        ("/+", "/a", True),
        ("a/+", "a/", True),
        ("a/b", "a/b/", False),
        ("a/+/+", "a/b", False),
        ("a/b/#", "a/b", True),
        ("a/b/#", "a/c", False),
        ("A/b", "a/b", False),
        ("a/+/c/#", "a/x/c/d/e", True),
        ("a//b", "a//b", True),
        ("a/+/b", "a//b", True),
        ("+/+/+", "a/b/c", True),
        ("+/+/+", "a/b", False),
        ("a/b/c/d", "a/b/c", False),
        ("a/b/c", "a/b/c/d", False),
        ("+/#", "a", True),
        ("x/$y", "x/$y", True),
        ("sdflmq/global/+/root_result", "sdflmq/global/s1/root_result", True),
        ("sdflmq/global/+/root_result", "sdflmq/global/s1/x/root_result", False),
        ("sdflmq/session/s1/agg/+/submit_update", "sdflmq/session/s1/agg/c3/submit_update", True),
    ],
)
def test_topic_matching(topic_filter, topic, expected):
    assert topic_matches(topic_filter, topic) is expected


@pytest.mark.parametrize("bad", ["a/#/b", "a#", "a/b+", "+a", "", "a/\x00"])
def test_invalid_filters_rejected(bad):
    with pytest.raises(TopicValidationError):
        validate_filter(bad)


@pytest.mark.parametrize("bad", ["a/+", "a/#", "", "a\x00b"])
def test_invalid_topics_rejected(bad):
    with pytest.raises(TopicValidationError):
        validate_topic(bad)


def _collect(store, done=None, n=None):
    def handler(topic, payload):
        store.append((topic, payload))
        if done is not None and n is not None and len(store) >= n:
            done.set()

    return handler


def test_publish_reaches_matching_subscribers_only(broker):
    hits, misses = [], []
    broker.subscribe("dev/+/temp", _collect(hits))
    broker.subscribe("dev/+/humidity", _collect(misses))

    assert broker.publish("dev/k1/temp", b"21.5") == 1
    assert broker.flush()
    assert hits == [("dev/k1/temp", b"21.5")]
    assert misses == []


def test_per_subscription_order_is_publish_order(broker):
    got = []
    broker.subscribe("seq", _collect(got))
    for i in range(200):
        broker.publish("seq", str(i).encode())
    assert broker.flush()
    assert [int(p) for _, p in got] == list(range(200))


def test_same_endpoint_and_filter_subscribes_once(broker):
    got = []
    first = broker.subscribe("a/#", _collect(got), endpoint="c1")
    again = broker.subscribe("a/#", _collect(got), endpoint="c1")
    assert first == again
    broker.publish("a/b", b"x")
    assert broker.flush()
    assert len(got) == 1
    assert broker.subscriptions("c1") == [("c1", "a/#")]


def test_unsubscribe_stops_delivery(broker):
    got = []
    sub = broker.subscribe("t", _collect(got))
    assert broker.unsubscribe(sub) is True
    assert broker.unsubscribe(sub) is False
    broker.publish("t", b"x")
    assert broker.flush()
    assert got == []


def test_handler_error_does_not_stop_dispatch(broker):
    got = []

    def boom(topic, payload):
        raise RuntimeError("handler failed")

    broker.subscribe("t", boom, endpoint="bad")
    broker.subscribe("t", _collect(got), endpoint="good")
    broker.publish("t", b"1")
    broker.publish("t", b"2")
    assert broker.flush()
    assert [p for _, p in got] == [b"1", b"2"]


def test_handler_may_publish_reentrantly(broker):
    done = threading.Event()
    got = []
    broker.subscribe("ping", lambda t, p: broker.publish("pong", p))
    broker.subscribe("pong", _collect(got, done, 1))
    broker.publish("ping", b"hi")
    assert done.wait(5)
    assert got == [("pong", b"hi")]


def test_publish_after_shutdown_fails():
    b = InMemoryBroker("gone")
    b.shutdown()
    assert b.closed
    with pytest.raises(TransportError):
        b.publish("t", b"x")


def test_bridged_line_delivers_exactly_once_everywhere(make_broker):
    a, b, c = make_broker("A"), make_broker("B"), make_broker("C")
    bridge_link(a, b, ["#"])
    bridge_link(b, c, ["#"])
    got = {name: [] for name in "ABC"}
    for name, br in zip("ABC", (a, b, c)):
        br.subscribe("fl/#", _collect(got[name]))

    a.publish("fl/x", b"from-a")
    c.publish("fl/y", b"from-c")
    for br in (a, b, c):
        assert br.flush()

    for name in "ABC":
        assert sorted(got[name]) == [("fl/x", b"from-a"), ("fl/y", b"from-c")]


def test_bridge_filters_limit_forwarding(make_broker):
    a, b = make_broker("A"), make_broker("B")
    bridge_link(a, b, ["shared/#"])
    got = []
    b.subscribe("#", _collect(got))
    a.publish("shared/1", b"x")
    a.publish("private/1", b"y")
    assert a.flush() and b.flush()
    assert got == [("shared/1", b"x")]


def test_bridge_rejects_self_duplicates_and_loops(make_broker):
    a, b, c = make_broker("A"), make_broker("B"), make_broker("C")
    with pytest.raises(TransportError):
        bridge_link(a, a, ["#"])
    with pytest.raises(TopicValidationError):
        bridge_link(a, b, [])
    bridge_link(a, b, ["#"])
    with pytest.raises(TransportError):
        bridge_link(b, a, ["#"])
    bridge_link(b, c, ["#"])
    with pytest.raises(TransportError):
        bridge_link(c, a, ["#"])


def test_concurrent_bridging_in_both_directions(make_broker):
    for i in range(20):
        a, b = make_broker(f"A{i}"), make_broker(f"B{i}")
        gate = threading.Barrier(2)
        outcomes = []

        def connect(x, y):
            gate.wait()
            try:
                outcomes.append(bridge_link(x, y, ["#"]))
            except TransportError:
                outcomes.append(None)

        workers = [threading.Thread(target=connect, args=pair, daemon=True) for pair in ((a, b), (b, a))]
        for w in workers:
            w.start()
        for w in workers:
            w.join(5.0)
        assert not any(w.is_alive() for w in workers)
        assert sorted(o is None for o in outcomes) == [False, True]


def test_latency_model_cost():
    m = LatencyModel(per_message_ms=5.0, per_byte_ns=10.0)
    assert m.cost_ms(0) == 5.0
    assert m.cost_ms(1_000_000) == pytest.approx(15.0)
    assert LatencyModel().is_zero and not m.is_zero


def test_injected_latency_delays_delivery(make_broker):
    b = make_broker("slow", latency=LatencyModel(per_message_ms=30.0))
    done = threading.Event()
    b.subscribe("t", lambda t, p: done.set())
    b.publish("t", b"x")
    assert not done.wait(0.01)
    assert done.wait(2)
