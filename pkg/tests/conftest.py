import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import pytest

SP_FIELD = "customfield_10002"


def jira_issue(key, points=3.0, summary=None, created="2016-01-12T10:00:00.000+0000"):
    fields = {
        "summary": f"issue {key}" if summary is None else summary,
        "description": f"description of {key}",
        "created": created,
    }
    if points is not None:
        fields[SP_FIELD] = points
    return {"key": key, "fields": fields}


class MockJiraHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_GET(self):
        script = self.server.script
        script["requests"].append(self.path)
        parsed = urlparse(self.path)
        if parsed.path != "/rest/api/2/search":
            self.send_error(404)
            return
        failures = script.get("fail_first", 0)
        if len(script["requests"]) <= failures:
            self.send_response(503)
            self.end_headers()
            return
        if script.get("status") and script["status"] != 200:
            body = json.dumps({"errorMessages": [script.get("message", "denied")]})
            self.send_response(script["status"])
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(body.encode())
            return
        params = parse_qs(parsed.query)
        start = int(params["startAt"][0])
        size = int(params["maxResults"][0])
        issues = script["issues"][start : start + size]
        body = json.dumps({"total": len(script["issues"]), "startAt": start, "issues": issues})
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body.encode())


@pytest.fixture
def mock_jira():
    server = ThreadingHTTPServer(("127.0.0.1", 0), MockJiraHandler)
    server.script = {"issues": [], "requests": []}
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server
    finally:
        server.shutdown()
        thread.join()
