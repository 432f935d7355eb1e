import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from selfcoherence.scg.planner import (
    PlannerClient,
    PlannerError,
    RatioTable,
    UnresolvedRatioError,
    plan_ratio,
)


def serve(respond):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            status, payload, delay = respond(body)
            time.sleep(delay)
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(json.dumps(payload).encode())

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, f"http://127.0.0.1:{server.server_address[1]}/ratio"


@pytest.fixture
def planner():
    servers = []

    def make(respond):
        server, url = serve(respond)
        servers.append(server)
        return url

    yield make
    for s in servers:
        s.shutdown()
        s.server_close()


class TestTable:
    def test_packaged_values(self):
        table = RatioTable.load()
        assert table.get("apple", "stem") == 0.05
        assert table.get("Apple", "Flesh") == 0.80

    def test_static_plan(self):
        plan = plan_ratio("apple", "stem")
        assert (plan.ratio, plan.source) == (0.05, "table")

    def test_unknown_part(self):
        with pytest.raises(UnresolvedRatioError):
            plan_ratio("apple", "wheel")

    def test_bad_table_ratio(self):
        with pytest.raises(ValueError):
            RatioTable({"x": {"y": 1.5}})


class TestPlannerClient:
    def test_planner_answer_is_used(self, planner):
        seen = []

        def respond(body):
            seen.append(body)
            return 200, {"ratio": 0.3}, 0

        client = PlannerClient(planner(respond))
        plan = plan_ratio("apple", "stem", "external-planner", client=client)
        assert (plan.ratio, plan.source) == (0.3, "planner")
        assert seen == [{"concept": "apple", "part": "stem"}]

    def test_out_of_range_ratio_falls_back(self, planner):
        client = PlannerClient(planner(lambda b: (200, {"ratio": 1.7}, 0)))
        plan = plan_ratio("apple", "stem", "external-planner", client=client)
        assert (plan.ratio, plan.source) == (0.05, "fallback")
        assert "1.7" in plan.note

    def test_http_error_falls_back(self, planner):
        client = PlannerClient(planner(lambda b: (503, {"error": "busy"}, 0)))
        plan = plan_ratio("apple", "flesh", "external-planner", client=client)
        assert (plan.ratio, plan.source) == (0.80, "fallback")
        assert "503" in plan.note

    def test_timeout_falls_back(self, planner):
        client = PlannerClient(planner(lambda b: (200, {"ratio": 0.5}, 1.0)), timeout=0.2)
        with pytest.raises(PlannerError):
            client.request_ratio("apple", "stem")
        assert plan_ratio("apple", "stem", "external-planner", client=client).source == "fallback"

    def test_malformed_body(self, planner):
        client = PlannerClient(planner(lambda b: (200, {"value": 0.5}, 0)))
        with pytest.raises(PlannerError):
            client.request_ratio("apple", "stem")

    def test_unreachable_without_table_entry(self):
        client = PlannerClient("http://127.0.0.1:9/ratio", timeout=0.2)
        with pytest.raises(UnresolvedRatioError):
            plan_ratio("apple", "wheel", "external-planner", client=client)

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv("SCG_PLANNER_URL", raising=False)
        assert PlannerClient.from_env() is None
        monkeypatch.setenv("SCG_PLANNER_URL", "http://example.invalid/x")
        monkeypatch.setenv("SCG_PLANNER_TIMEOUT", "0.5")
        client = PlannerClient.from_env()
        assert (client.url, client.timeout) == ("http://example.invalid/x", 0.5)
