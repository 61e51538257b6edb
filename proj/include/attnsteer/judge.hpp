#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "attnsteer/common.hpp"
#include "attnsteer/io.hpp"

namespace attnsteer {

struct KeywordRubric {
  std::unordered_set<TokenId> signal_tokens;
  double threshold = 0.25;
};

/// Five probe questions plus how to judge the answers.
struct ProbeSet {
  std::string concept_id;
  std::string concept_class;
  std::vector<std::string> questions;
  KeywordRubric rubric;
  std::string judge_prompt;  // HTTP judge only; "{concept}", "{question}", "{response}" are substituted

  void validate() const;
};

/// 1 iff the fraction of signal tokens in `response` is above the threshold.
int keyword_judge(std::span<const TokenId> response, const KeywordRubric& rubric);

// ---- HTTP judge ----------------------------------------------------------

struct HttpResponse {
  int status = 0;
  std::string body;
};

class Transport {
 public:
  virtual ~Transport() = default;
  // Throws NetworkError when no HTTP response was obtained at all.
  virtual HttpResponse post(const std::string& url, const std::string& body,
                            const std::map<std::string, std::string>& headers) = 0;
  virtual bool needs_credentials() const { return true; }
};

class HttplibTransport : public Transport {
 public:
  explicit HttplibTransport(double timeout_seconds = 30.0) : timeout_seconds_(timeout_seconds) {}
  HttpResponse post(const std::string& url, const std::string& body,
                    const std::map<std::string, std::string>& headers) override;

 private:
  double timeout_seconds_;
};

class MockTransport : public Transport {
 public:
  using Handler = std::function<HttpResponse(const std::string& body)>;
  explicit MockTransport(Handler handler) : handler_(std::move(handler)) {}
  HttpResponse post(const std::string& url, const std::string& body,
                    const std::map<std::string, std::string>& headers) override;
  bool needs_credentials() const override { return false; }
  int calls() const;

 private:
  Handler handler_;
  mutable std::mutex mu_;
  int calls_ = 0;
};

/// Forwards to `inner` and keeps request/response pairs, keyed by a hash of
/// url + body. Headers (and so the key) are never recorded.
class RecordingTransport : public Transport {
 public:
  explicit RecordingTransport(std::shared_ptr<Transport> inner) : inner_(std::move(inner)) {}
  HttpResponse post(const std::string& url, const std::string& body,
                    const std::map<std::string, std::string>& headers) override;
  bool needs_credentials() const override { return inner_->needs_credentials(); }
  void save(const fs::path& path) const;

 private:
  std::shared_ptr<Transport> inner_;
  mutable std::mutex mu_;
  std::map<std::string, json> records_;
};

class ReplayTransport : public Transport {
 public:
  explicit ReplayTransport(const fs::path& path);
  HttpResponse post(const std::string& url, const std::string& body,
                    const std::map<std::string, std::string>& headers) override;
  bool needs_credentials() const override { return false; }
  std::size_t size() const noexcept { return records_.size(); }

 private:
  std::map<std::string, HttpResponse> records_;
};

struct HttpJudgeConfig {
  std::string endpoint;
  std::string api_key_env = "ATTNSTEER_JUDGE_API_KEY";
  std::string model = "gpt-4o";
  std::string prompt_template;
  int max_attempts = 3;
  int initial_backoff_ms = 500;
  int max_in_flight = 4;
  double timeout_seconds = 30.0;

  json to_json() const;
  static HttpJudgeConfig from_json(const json& j);
};

struct JudgeItem {
  std::string concept_id;
  std::string question;
  std::string response_text;
  std::string judge_prompt;  // overrides the config template when non-empty
};

class HttpJudge {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  HttpJudge(HttpJudgeConfig config, std::shared_ptr<Transport> transport, Sleeper sleeper = {});

  int judge(const JudgeItem& item) const;
  /// Verdicts in input order; at most max_in_flight requests run at once.
  std::vector<int> judge_all(std::span<const JudgeItem> items) const;

  std::string render_prompt(const JudgeItem& item) const;
  std::string request_body(const JudgeItem& item) const;

 private:
  HttpJudgeConfig config_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleeper_;
};

/// Parses a chat-completions reply whose message content must be exactly 0 or 1.
int parse_verdict(const std::string& response_body);

// ---- scoring -------------------------------------------------------------

struct SteeringScore {
  std::string concept_id;
  std::string concept_class;
  std::string method;
  std::vector<double> coefficients;
  std::vector<std::vector<int>> verdicts;  // [question][coefficient]
  std::vector<int> best;                   // per question
  double score = 0.0;
};

/// Per-question max over coefficients, then the mean over the five questions.
SteeringScore steering_score(const std::string& concept_id, const std::string& concept_class,
                             const std::string& method, std::span<const double> coefficients,
                             const std::vector<std::vector<int>>& verdicts, std::size_t n_questions = 5);

/// Mean concept score per class, in first-seen class order.
std::vector<std::pair<std::string, double>> class_scores(std::span<const SteeringScore> scores);

void write_scores_csv(const fs::path& path, std::span<const SteeringScore> scores);

}  // namespace attnsteer
