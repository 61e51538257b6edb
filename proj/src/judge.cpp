#include "attnsteer/judge.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace attnsteer {

void ProbeSet::validate() const {
  require(questions.size() == 5, ErrorKind::ConfigError,
          concept_id + ": expected 5 probe questions, got " + std::to_string(questions.size()));
  require(!rubric.signal_tokens.empty() || !judge_prompt.empty(), ErrorKind::ConfigError,
          concept_id + ": probe set has no rubric");
}

int keyword_judge(std::span<const TokenId> response, const KeywordRubric& rubric) {
  require(!rubric.signal_tokens.empty(), ErrorKind::InvalidArgument, "rubric has no signal tokens");
  if (response.empty()) fail(ErrorKind::EmptyResponse, "nothing to judge");
  std::size_t hits = 0;
  for (TokenId t : response) hits += rubric.signal_tokens.count(t);
  const double freq = static_cast<double>(hits) / static_cast<double>(response.size());
  return freq > rubric.threshold ? 1 : 0;
}

// ---- transports ----------------------------------------------------------

HttpResponse HttplibTransport::post(const std::string& url, const std::string& body,
                                    const std::map<std::string, std::string>& headers) {
  const auto scheme_end = url.find("://");
  require(scheme_end != std::string::npos, ErrorKind::ConfigError, "endpoint needs a scheme: " + url);
  const auto path_begin = url.find('/', scheme_end + 3);
  const std::string origin = url.substr(0, path_begin);
  const std::string path = path_begin == std::string::npos ? "/" : url.substr(path_begin);

  httplib::Client client(origin);
  const auto secs = static_cast<time_t>(timeout_seconds_);
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);
  httplib::Headers h;
  for (const auto& [k, v] : headers) h.emplace(k, v);
  auto res = client.Post(path, h, body, "application/json");
  if (!res) fail(ErrorKind::NetworkError, "POST " + origin + path + ": " + httplib::to_string(res.error()));
  return HttpResponse{res->status, res->body};
}

HttpResponse MockTransport::post(const std::string&, const std::string& body,
                                 const std::map<std::string, std::string>&) {
  {
    std::lock_guard lock(mu_);
    ++calls_;
  }
  return handler_(body);
}

int MockTransport::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

namespace {

std::string record_key(const std::string& url, const std::string& body) { return sha256_hex(url + "\n" + body); }

}  // namespace

HttpResponse RecordingTransport::post(const std::string& url, const std::string& body,
                                      const std::map<std::string, std::string>& headers) {
  HttpResponse res = inner_->post(url, body, headers);
  std::lock_guard lock(mu_);
  records_[record_key(url, body)] =
      json{{"url", url}, {"request", body}, {"status", res.status}, {"response", res.body}};
  return res;
}

void RecordingTransport::save(const fs::path& path) const {
  std::lock_guard lock(mu_);
  json out = json::array();
  for (const auto& [key, rec] : records_) {
    json r = rec;
    r["key"] = key;
    out.push_back(std::move(r));
  }
  write_file_atomic(path, out.dump(2) + "\n");
}

ReplayTransport::ReplayTransport(const fs::path& path) {
  const json j = json::parse(read_text_file(path));
  for (const auto& r : j) {
    records_[r.at("key").get<std::string>()] = HttpResponse{r.at("status").get<int>(), r.at("response").get<std::string>()};
  }
}

HttpResponse ReplayTransport::post(const std::string& url, const std::string& body,
                                   const std::map<std::string, std::string>&) {
  const auto it = records_.find(record_key(url, body));
  if (it == records_.end()) fail(ErrorKind::NetworkError, "request not present in replay transcript");
  return it->second;
}

// ---- HTTP judge ----------------------------------------------------------

json HttpJudgeConfig::to_json() const {
  return json{{"endpoint", endpoint},
              {"api_key_env", api_key_env},
              {"model", model},
              {"prompt_template", prompt_template},
              {"max_attempts", max_attempts},
              {"initial_backoff_ms", initial_backoff_ms},
              {"max_in_flight", max_in_flight},
              {"timeout_seconds", timeout_seconds}};
}

HttpJudgeConfig HttpJudgeConfig::from_json(const json& j) {
  HttpJudgeConfig c;
  c.endpoint = j.value("endpoint", c.endpoint);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.model = j.value("model", c.model);
  c.prompt_template = j.value("prompt_template", c.prompt_template);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.initial_backoff_ms = j.value("initial_backoff_ms", c.initial_backoff_ms);
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  require(c.max_attempts >= 1, ErrorKind::ConfigError, "max_attempts must be >= 1");
  require(c.max_in_flight >= 1, ErrorKind::ConfigError, "max_in_flight must be >= 1");
  return c;
}

HttpJudge::HttpJudge(HttpJudgeConfig config, std::shared_ptr<Transport> transport, Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
  require(transport_ != nullptr, ErrorKind::InvalidArgument, "judge needs a transport");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

}  // namespace

std::string HttpJudge::render_prompt(const JudgeItem& item) const {
  std::string prompt = item.judge_prompt.empty() ? config_.prompt_template : item.judge_prompt;
  require(!prompt.empty(), ErrorKind::ConfigError, "no judge prompt template configured");
  replace_all(prompt, "{concept}", item.concept_id);
  replace_all(prompt, "{question}", item.question);
  replace_all(prompt, "{response}", item.response_text);
  return prompt;
}

std::string HttpJudge::request_body(const JudgeItem& item) const {
  const json body{{"model", config_.model},
                  {"temperature", 0},
                  {"messages", json::array({json{{"role", "user"}, {"content", render_prompt(item)}}})}};
  return body.dump();
}

int parse_verdict(const std::string& response_body) {
  json j;
  try {
    j = json::parse(response_body);
  } catch (const json::exception& e) {
    fail(ErrorKind::MalformedVerdict, std::string("judge reply is not JSON: ") + e.what());
  }
  std::string content;
  try {
    content = j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    fail(ErrorKind::MalformedVerdict, "judge reply has no choices[0].message.content");
  }
  const auto b = content.find_first_not_of(" \t\r\n");
  const auto e = content.find_last_not_of(" \t\r\n");
  const std::string trimmed = b == std::string::npos ? "" : content.substr(b, e - b + 1);
  if (trimmed == "0") return 0;
  if (trimmed == "1") return 1;
  fail(ErrorKind::MalformedVerdict, "judge replied '" + trimmed + "'");
}

int HttpJudge::judge(const JudgeItem& item) const {
  std::map<std::string, std::string> headers;
  if (transport_->needs_credentials()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') fail(ErrorKind::AuthError, "environment variable " + config_.api_key_env + " is unset");
    headers["Authorization"] = std::string("Bearer ") + key;
  }
  const std::string body = request_body(item);
  auto backoff = std::chrono::milliseconds(config_.initial_backoff_ms);
  std::string last_error;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    try {
      const HttpResponse res = transport_->post(config_.endpoint, body, headers);
      if (res.status == 401 || res.status == 403) fail(ErrorKind::AuthError, "judge endpoint returned " + std::to_string(res.status));
      if (res.status >= 200 && res.status < 300) return parse_verdict(res.body);
      last_error = "status " + std::to_string(res.status);
      const bool retryable = res.status == 408 || res.status == 429 || res.status >= 500;
      if (!retryable) break;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NetworkError) throw;
      last_error = e.what();
    }
    if (attempt < config_.max_attempts) {
      spdlog::warn("judge attempt {} failed ({}); retrying in {} ms", attempt, last_error, backoff.count());
      sleeper_(backoff);
      backoff *= 2;
    }
  }
  fail(ErrorKind::NetworkError, "judge request failed: " + last_error);
}

std::vector<int> HttpJudge::judge_all(std::span<const JudgeItem> items) const {
  std::vector<int> out(items.size(), 0);
  std::vector<std::exception_ptr> errors(items.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < items.size(); i = next++) {
      try {
        out[i] = judge(items[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(config_.max_in_flight), items.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---- scoring -------------------------------------------------------------

SteeringScore steering_score(const std::string& concept_id, const std::string& concept_class,
                             const std::string& method, std::span<const double> coefficients,
                             const std::vector<std::vector<int>>& verdicts, std::size_t n_questions) {
  if (verdicts.size() != n_questions) {
    fail(ErrorKind::MissingQuestion, concept_id + ": verdicts for " + std::to_string(verdicts.size()) + " of " +
                                         std::to_string(n_questions) + " questions");
  }
  SteeringScore s;
  s.concept_id = concept_id;
  s.concept_class = concept_class;
  s.method = method;
  s.coefficients.assign(coefficients.begin(), coefficients.end());
  s.verdicts = verdicts;
  int total = 0;
  for (std::size_t q = 0; q < verdicts.size(); ++q) {
    if (verdicts[q].empty()) fail(ErrorKind::MissingQuestion, concept_id + ": question " + std::to_string(q) + " has no verdicts");
    int best = 0;
    for (int v : verdicts[q]) {
      require(v == 0 || v == 1, ErrorKind::InvalidArgument, "verdicts must be 0 or 1");
      best = std::max(best, v);
    }
    s.best.push_back(best);
    total += best;
  }
  s.score = static_cast<double>(total) / static_cast<double>(n_questions);
  return s;
}

std::vector<std::pair<std::string, double>> class_scores(std::span<const SteeringScore> scores) {
  std::vector<std::pair<std::string, double>> out;
  std::vector<int> counts;
  for (const auto& s : scores) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == s.concept_class; });
    if (it == out.end()) {
      out.emplace_back(s.concept_class, 0.0);
      counts.push_back(0);
      it = out.end() - 1;
    }
    it->second += s.score;
    ++counts[static_cast<std::size_t>(it - out.begin())];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].second /= counts[i];
  return out;
}

void write_scores_csv(const fs::path& path, std::span<const SteeringScore> scores) {
  std::ostringstream out;
  out << "concept_id,class,method,q1,q2,q3,q4,q5,score\n";
  for (const auto& s : scores) {
    out << s.concept_id << "," << s.concept_class << "," << s.method;
    for (int b : s.best) out << "," << b;
    out << "," << s.score << "\n";
  }
  write_file_atomic(path, out.str());
}

}  // namespace attnsteer
