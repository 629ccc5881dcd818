import pytest

from ctxpeers.tasks import Future, gather, spawn


def test_coroutine_receives_results_and_exceptions():
    a, b = Future(), Future()

    def body():
        x = yield a
        try:
            yield b
        except KeyError:
            return x * 2

    out = spawn(body())
    assert not out.done()
    a.set_result(21)
    b.set_exception(KeyError("k"))
    assert out.result() == 42


def test_already_resolved_futures_run_inline():
    def body():
        return (yield Future.resolved(5)) + 1
    assert spawn(body()).result() == 6


def test_bad_yield_becomes_type_error():
    def body():
        yield 3
    with pytest.raises(TypeError):
        spawn(body()).result()


def test_gather_collects_in_order():
    fs = [Future() for _ in range(3)]
    g = gather(fs)
    fs[2].set_result("c")
    fs[0].set_exception(ValueError("a"))
    assert not g.done()
    fs[1].set_result("b")
    oks = [ok for ok, _ in g.result()]
    assert oks == [False, True, True] and g.result()[2][1] == "c"
    assert gather([]).result() == []


def test_future_resolves_once():
    f = Future()
    f.set_result(1)
    f.set_result(2)
    f.set_exception(RuntimeError())
    assert f.result() == 1
