#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "redrag/remote_gateway.hpp"

using namespace redrag;
using Catch::Matchers::ContainsSubstring;

namespace {

// In-process model server implementing the wire protocol. Behavior switches
// on magic prompt/text values so each failure mode can be driven from a test.
class StubServer {
public:
  explicit StubServer(bool forced_decode = true) {
    server_.Get("/v1/capabilities", [this, forced_decode](const httplib::Request& req,
                                                          httplib::Response& res) {
      last_auth_ = req.get_header_value("Authorization");
      res.set_content(nlohmann::json{{"forced_decode", forced_decode},
                                     {"tokenizer_id", "whitespace.v1"},
                                     {"embed_dim", 4}}
                          .dump(),
                      "application/json");
    });
    server_.Post("/v1/generate", [](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body);
      std::string prompt = body.at("prompt");
      if (prompt == "explode") {
        res.status = 500;
        return;
      }
      if (prompt == "garbage") {
        res.set_content("not json at all", "application/json");
        return;
      }
      nlohmann::json trace = {
          {"emitted_tokens", {"ok", "<eos>"}},
          {"total_logprob", -0.4},
          {"steps",
           {{{"step_index", 0},
             {"candidates", {{{"token", "ok"}, {"logprob", -0.3}}}}},
            {{"step_index", 1},
             {"candidates", {{{"token", "<eos>"}, {"logprob", -0.1}}}}}}}};
      if (prompt == "inconsistent") trace["total_logprob"] = -9.9;
      res.set_content(trace.dump(), "application/json");
    });
    server_.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
      ++score_calls_;
      auto body = nlohmann::json::parse(req.body);
      auto target = body.at("target").get<std::vector<std::string>>();
      std::string prompt = body.at("prompt");
      nlohmann::json steps = nlohmann::json::array();
      nlohmann::json emitted = nlohmann::json::array();
      double total = 0.0;
      for (std::size_t i = 0; i < target.size(); ++i) {
        std::string tok = prompt == "drift" ? "wrong" : target[i];
        emitted.push_back(tok);
        steps.push_back({{"step_index", i},
                         {"candidates", {{{"token", tok}, {"logprob", -0.25}}}}});
        total += -0.25;
      }
      res.set_content(nlohmann::json{{"emitted_tokens", emitted},
                                     {"total_logprob", total},
                                     {"steps", steps}}
                          .dump(),
                      "application/json");
    });
    server_.Post("/v1/sample", [](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body);
      std::size_t n = body.at("n_candidates");
      if (body.at("prompt") == "short") n -= 1;
      std::vector<std::string> out;
      for (std::size_t i = 0; i < n; ++i)
        out.push_back("candidate-" + std::to_string(i));
      res.set_content(nlohmann::json{{"candidates", out}}.dump(),
                      "application/json");
    });
    server_.Post("/v1/embed", [](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body);
      std::vector<double> v = {0.5, 0.5, 0.5, 0.5};
      if (body.at("text") == "fat") v.push_back(0.1);
      res.set_content(nlohmann::json{{"vector", v}}.dump(), "application/json");
    });
    server_.Post("/v1/judge", [](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body);
      std::string rubric = body.at("rubric");
      nlohmann::json out;
      if (rubric == "no-verdict")
        out = {{"rationale", "forgot the verdict"}};
      else if (rubric == "weird-verdict")
        out = {{"verdict", "maybe"}, {"rationale", "hedging"}};
      else
        out = {{"verdict",
                body.at("transcript").get<std::string>().find("win") !=
                        std::string::npos
                    ? "success"
                    : "failure"},
               {"rationale", "keyword rule"}};
      res.set_content(out.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    REQUIRE(port_ > 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const {
    return "http://127.0.0.1:" + std::to_string(port_);
  }
  const std::string& last_auth() const { return last_auth_; }
  int score_calls() const { return score_calls_; }

private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::string last_auth_;
  std::atomic<int> score_calls_{0};
};

GatewayConfig remote_cfg(const StubServer& server) {
  GatewayConfig cfg;
  cfg.backend = BackendKind::remote;
  cfg.endpoint = server.endpoint();
  cfg.api_key_env = "REDRAG_TEST_KEY";
  cfg.n_candidates = 3;
  return cfg;
}

} // namespace

TEST_CASE("remote backend reads capabilities once and authenticates from env") {
  ::setenv("REDRAG_TEST_KEY", "sekrit-token", 1);
  StubServer server;
  RemoteGateway gw(remote_cfg(server));
  CHECK(gw.embed_dim() == 4);
  CHECK(gw.tokenizer_id() == "whitespace.v1");
  CHECK(gw.supports_forced_decode());
  CHECK(server.last_auth() == "Bearer sekrit-token");
  ::unsetenv("REDRAG_TEST_KEY");
}

TEST_CASE("remote traces parse and validate end to end") {
  StubServer server;
  RemoteGateway gw(remote_cfg(server));
  GatewayConfig cfg = remote_cfg(server);
  GenerationTrace tr = gw.generate_with_topk("hello", cfg);
  CHECK(tr.emitted_tokens == std::vector<std::string>{"ok", "<eos>"});
  CHECK(tr.total_logprob == -0.4);
  CHECK_NOTHROW(tr.validate());
  // server-side inconsistency is caught before the trace escapes
  CHECK_THROWS_AS(gw.generate_with_topk("inconsistent", cfg), GatewayError);
}

TEST_CASE("remote forced scoring echoes the target or fails loudly") {
  StubServer server;
  RemoteGateway gw(remote_cfg(server));
  GatewayConfig cfg = remote_cfg(server);
  std::vector<std::string> target = {"a", "b", "c"};
  GenerationTrace tr = gw.score_forced("p", target, cfg);
  CHECK(tr.emitted_tokens == target);
  CHECK(tr.total_logprob == Catch::Approx(-0.75));
  CHECK_THROWS_AS(gw.score_forced("drift", target, cfg), GatewayError);
}

TEST_CASE("backend without forced decoding refuses to score locally") {
  StubServer server(/*forced_decode=*/false);
  RemoteGateway gw(remote_cfg(server));
  GatewayConfig cfg = remote_cfg(server);
  CHECK_FALSE(gw.supports_forced_decode());
  CHECK_THROWS_AS(gw.score_forced("p", {"a"}, cfg), CapabilityError);
  CHECK(server.score_calls() == 0); // rejected before any request went out
}

TEST_CASE("remote sampling returns exactly the requested candidate count") {
  StubServer server;
  RemoteGateway gw(remote_cfg(server));
  GatewayConfig cfg = remote_cfg(server);
  auto c = gw.sample_candidates("p", cfg);
  REQUIRE(c.size() == 3);
  CHECK(c[0] == "candidate-0");
  CHECK_THROWS_WITH(gw.sample_candidates("short", cfg),
                    ContainsSubstring("candidates"));
}

TEST_CASE("remote judge maps verdicts and flags protocol violations") {
  StubServer server;
  RemoteGateway gw(remote_cfg(server));
  CHECK(gw.judge("c", "a winning move", "keyword").verdict == Verdict::success);
  CHECK(gw.judge("c", "nothing here", "keyword").verdict == Verdict::failure);
  CHECK_THROWS_AS(gw.judge("c", "t", "no-verdict"), JudgeProtocolError);
  CHECK_THROWS_AS(gw.judge("c", "t", "weird-verdict"), JudgeProtocolError);
}

TEST_CASE("remote embeddings must match the declared dimension") {
  StubServer server;
  RemoteGateway gw(remote_cfg(server));
  Vec v = gw.embed("text");
  CHECK(v.size() == 4);
  CHECK_THROWS_WITH(gw.embed("fat"), ContainsSubstring("dim"));
}

TEST_CASE("transport and server failures surface as retriable gateway errors") {
  StubServer server;
  RemoteGateway gw(remote_cfg(server));
  GatewayConfig cfg = remote_cfg(server);
  CHECK_THROWS_WITH(gw.generate_with_topk("explode", cfg),
                    ContainsSubstring("HTTP 500"));
  CHECK_THROWS_WITH(gw.generate_with_topk("garbage", cfg),
                    ContainsSubstring("unparseable"));

  GatewayConfig dead = cfg;
  dead.endpoint = "http://127.0.0.1:1"; // nothing listens there
  CHECK_THROWS_AS(RemoteGateway(dead), GatewayError);
}

TEST_CASE("remote config requires an endpoint") {
  GatewayConfig cfg;
  cfg.backend = BackendKind::remote;
  CHECK_THROWS_AS(RemoteGateway(cfg), ConfigError);
}
