#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <thread>

// Eigen before httplib: <resolv.h> defines a _res macro that clashes with Eigen internals.
#include "attnsteer/judge.hpp"

#include <httplib.h>

using namespace attnsteer;

namespace {

std::string reply(const std::string& content) {
  return json{{"choices", json::array({json{{"message", json{{"role", "assistant"}, {"content", content}}}}})}}.dump();
}

HttpJudgeConfig judge_config() {
  HttpJudgeConfig c;
  c.endpoint = "http://judge.invalid/v1/chat/completions";
  c.prompt_template = "Concept: {concept}\nQuestion: {question}\nAnswer: {response}\nReply 1 or 0.";
  c.initial_backoff_ms = 1;
  return c;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::InvalidArgument;
}

const auto no_sleep = [](std::chrono::milliseconds) {};

}  // namespace

TEST_CASE("keyword judge") {
  KeywordRubric r{{10, 11, 12}, 0.25};
  CHECK(keyword_judge(std::vector<TokenId>{1, 2, 3, 4}, r) == 0);
  CHECK(keyword_judge(std::vector<TokenId>{10, 11, 12, 10}, r) == 1);
  CHECK(kind_of([&] { keyword_judge(std::vector<TokenId>{}, r); }) == ErrorKind::EmptyResponse);
  // boundary: exactly at the threshold is not above it
  CHECK(keyword_judge(std::vector<TokenId>{10, 1, 2, 3}, r) == 0);
  CHECK(keyword_judge(std::vector<TokenId>{10, 11, 2, 3}, r) == 1);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 12));
    std::vector<TokenId> resp(n);
    int hits = 0;
    for (auto& t : resp) {
      t = static_cast<TokenId>(uniform_index(rng, 16));
      hits += t >= 10 && t <= 12;
    }
    const double thr = static_cast<double>(uniform_index(rng, 5)) / 4.0;
    KeywordRubric rr{{10, 11, 12}, thr};
    CHECK(keyword_judge(resp, rr) == (hits > thr * n ? 1 : 0));
  }
}

TEST_CASE("verdict parsing") {
  CHECK(parse_verdict(reply("1")) == 1);
  CHECK(parse_verdict(reply(" 0\n")) == 0);
  CHECK(kind_of([] { parse_verdict(reply("maybe")); }) == ErrorKind::MalformedVerdict);
  CHECK(kind_of([] { parse_verdict("not json"); }) == ErrorKind::MalformedVerdict);
  CHECK(kind_of([] { parse_verdict("{}"); }) == ErrorKind::MalformedVerdict);
}

TEST_CASE("http judge with a stubbed transport") {
  auto ok = std::make_shared<MockTransport>([](const std::string&) { return HttpResponse{200, reply("1")}; });
  HttpJudge j(judge_config(), ok, no_sleep);
  const JudgeItem item{"pirate", "What is rain?", "arr matey", ""};
  CHECK(j.judge(item) == 1);
  const auto body = json::parse(j.request_body(item));
  CHECK(body.at("messages").at(0).at("content").get<std::string>().find("arr matey") != std::string::npos);

  auto maybe = std::make_shared<MockTransport>([](const std::string&) { return HttpResponse{200, reply("maybe")}; });
  CHECK(kind_of([&] { HttpJudge(judge_config(), maybe, no_sleep).judge(item); }) == ErrorKind::MalformedVerdict);

  // transient failures are retried, up to max_attempts
  std::atomic<int> n{0};
  auto flaky = std::make_shared<MockTransport>([&](const std::string&) {
    return ++n < 3 ? HttpResponse{503, ""} : HttpResponse{200, reply("0")};
  });
  std::vector<long> waits;
  HttpJudge jf(judge_config(), flaky, [&](std::chrono::milliseconds d) { waits.push_back(d.count()); });
  CHECK(jf.judge(item) == 0);
  CHECK(flaky->calls() == 3);
  CHECK(waits == std::vector<long>{1, 2});

  auto down = std::make_shared<MockTransport>([](const std::string&) { return HttpResponse{500, ""}; });
  CHECK(kind_of([&] { HttpJudge(judge_config(), down, no_sleep).judge(item); }) == ErrorKind::NetworkError);
  CHECK(down->calls() == 3);
  auto bad_req = std::make_shared<MockTransport>([](const std::string&) { return HttpResponse{400, ""}; });
  CHECK(kind_of([&] { HttpJudge(judge_config(), bad_req, no_sleep).judge(item); }) == ErrorKind::NetworkError);
  CHECK(bad_req->calls() == 1);
  auto denied = std::make_shared<MockTransport>([](const std::string&) { return HttpResponse{401, ""}; });
  CHECK(kind_of([&] { HttpJudge(judge_config(), denied, no_sleep).judge(item); }) == ErrorKind::AuthError);
  CHECK(denied->calls() == 1);
}

TEST_CASE("judge_all keeps input order") {
  auto echo = std::make_shared<MockTransport>([](const std::string& body) {
    const auto content = json::parse(body).at("messages").at(0).at("content").get<std::string>();
    return HttpResponse{200, reply(content.find("yes") != std::string::npos ? "1" : "0")};
  });
  HttpJudgeConfig c = judge_config();
  c.max_in_flight = 3;
  HttpJudge j(c, echo, no_sleep);
  std::vector<JudgeItem> items;
  std::vector<int> want;
  for (int i = 0; i < 40; ++i) {
    const bool y = (i * 7) % 3 == 0;
    items.push_back(JudgeItem{"c", "q" + std::to_string(i), y ? "yes" : "no", ""});
    want.push_back(y);
  }
  CHECK(j.judge_all(items) == want);
}

TEST_CASE("recorded transcripts replay offline and never store the key") {
  const auto dir = std::filesystem::temp_directory_path() / "attnsteer_judge_test";
  std::filesystem::create_directories(dir);
  ::setenv("ATTNSTEER_TEST_JUDGE_KEY", "sk-secret-value", 1);
  HttpJudgeConfig c = judge_config();
  c.api_key_env = "ATTNSTEER_TEST_JUDGE_KEY";

  std::string seen_header;
  struct KeyedMock : Transport {
    std::string* seen;
    HttpResponse post(const std::string&, const std::string& body, const std::map<std::string, std::string>& h) override {
      *seen = h.at("Authorization");
      return HttpResponse{200, reply(body.find("pirate") != std::string::npos ? "1" : "0")};
    }
  };
  auto inner = std::make_shared<KeyedMock>();
  inner->seen = &seen_header;
  auto rec = std::make_shared<RecordingTransport>(inner);
  const std::vector<JudgeItem> items{{"pirate", "q1", "arr", ""}, {"robot", "q2", "beep", ""}, {"pirate", "q3", "x", ""}};
  const auto live = HttpJudge(c, rec, no_sleep).judge_all(items);
  CHECK(live == std::vector<int>{1, 0, 1});
  CHECK(seen_header == "Bearer sk-secret-value");
  rec->save(dir / "t.json");
  CHECK(read_text_file(dir / "t.json").find("sk-secret") == std::string::npos);

  ::unsetenv("ATTNSTEER_TEST_JUDGE_KEY");
  auto replay = std::make_shared<ReplayTransport>(dir / "t.json");
  CHECK(replay->size() == 3);
  CHECK(HttpJudge(c, replay, no_sleep).judge_all(items) == live);
  const std::vector<JudgeItem> other{{"wizard", "q9", "?", ""}};
  CHECK(kind_of([&] { HttpJudge(c, replay, no_sleep).judge_all(other); }) == ErrorKind::NetworkError);

  // a live transport without a key fails before any request
  CHECK(kind_of([&] { HttpJudge(c, std::make_shared<HttplibTransport>(), no_sleep).judge(items[0]); }) ==
        ErrorKind::AuthError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("http judge against a local server") {
  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (++hits == 1) {
      res.status = 429;
      return;
    }
    if (req.get_header_value("Authorization") != "Bearer local-key") {
      res.status = 401;
      return;
    }
    res.set_content(reply(req.body.find("pirate") != std::string::npos ? "1" : "0"), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("ATTNSTEER_TEST_LOCAL_KEY", "local-key", 1);
  HttpJudgeConfig c = judge_config();
  c.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  c.api_key_env = "ATTNSTEER_TEST_LOCAL_KEY";
  c.timeout_seconds = 5;
  HttpJudge j(c, std::make_shared<HttplibTransport>(5.0), no_sleep);
  CHECK(j.judge(JudgeItem{"pirate", "q", "arr", ""}) == 1);
  CHECK(hits == 2);
  CHECK(j.judge(JudgeItem{"robot", "q", "beep", ""}) == 0);

  ::setenv("ATTNSTEER_TEST_LOCAL_KEY", "wrong", 1);
  CHECK(kind_of([&] { j.judge(JudgeItem{"robot", "q", "beep", ""}); }) == ErrorKind::AuthError);
  ::unsetenv("ATTNSTEER_TEST_LOCAL_KEY");
  server.stop();
  th.join();

  HttpJudgeConfig dead = c;
  dead.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  dead.timeout_seconds = 1;
  auto mock_key = std::make_shared<MockTransport>([](const std::string&) -> HttpResponse {
    fail(ErrorKind::NetworkError, "connection refused");
  });
  CHECK(kind_of([&] { HttpJudge(dead, mock_key, no_sleep).judge(JudgeItem{"a", "b", "c", ""}); }) ==
        ErrorKind::NetworkError);
  CHECK(mock_key->calls() == 3);
}

TEST_CASE("steering score") {
  const std::vector<double> eps{0.2, 0.4, 0.6};
  const std::vector<std::vector<int>> zeros(5, std::vector<int>(3, 0));
  CHECK(steering_score("c", "k", "m", eps, zeros).score == 0.0);
  auto v = zeros;
  v[0][1] = v[2][1] = v[4][1] = 1;
  CHECK(steering_score("c", "k", "m", eps, v).score == doctest::Approx(0.6));
  CHECK(kind_of([&] { steering_score("c", "k", "m", eps, std::vector<std::vector<int>>(4, {0})); }) ==
        ErrorKind::MissingQuestion);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::vector<int>> t(5, std::vector<int>(3));
    int total = 0;
    for (auto& q : t) {
      int best = 0;
      for (auto& x : q) best = std::max(best, x = static_cast<int>(uniform_index(rng, 4) == 0));
      total += best;
    }
    CHECK(steering_score("c", "k", "m", eps, t).score == doctest::Approx(total / 5.0));
  }

  std::vector<SteeringScore> s{steering_score("a", "x", "m", eps, zeros), steering_score("b", "x", "m", eps, v),
                               steering_score("c", "y", "m", eps, v)};
  const auto cs = class_scores(s);
  REQUIRE(cs.size() == 2);
  CHECK(cs[0].first == "x");
  CHECK(cs[0].second == doctest::Approx(0.3));
  CHECK(cs[1].second == doctest::Approx(0.6));
}
