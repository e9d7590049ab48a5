#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace tadp::cap {

struct CaptionRecord {
    std::string image_id;
    std::string caption;
    std::string builder = "caption";
    int min_tokens = 0;
    std::optional<std::string> modifier_id;
    std::optional<std::string> cleaned;
    std::string provenance = "live";  // live | fixture

    std::string to_json_line() const;
    static CaptionRecord from_json_line(const std::string& line);
};

class Transport {
public:
    virtual ~Transport() = default;
    struct Response {
        int status = 0;
        std::string body;
    };
    virtual Response post(const std::string& endpoint, const std::string& body) = 0;
};

// real HTTP POST against e.g. http://host:port/caption
class HttpTransport : public Transport {
public:
    explicit HttpTransport(int timeout_ms = 10000) : timeout_ms_(timeout_ms) {}
    Response post(const std::string& endpoint, const std::string& body) override;

private:
    int timeout_ms_ = 10000;
};

// test double that records every call; optionally fails the first n
class CountingTransport : public Transport {
public:
    explicit CountingTransport(std::string reply_body = "", int fail_first = 0)
        : reply_(std::move(reply_body)), fail_first_(fail_first) {}
    Response post(const std::string& endpoint, const std::string& body) override;
    int calls() const { return calls_.load(); }
    std::vector<std::string> bodies() const;

private:
    std::string reply_;
    int fail_first_ = 0;
    std::atomic<int> calls_{0};
    mutable std::mutex mu_;
    std::vector<std::string> bodies_;
};

struct ClientConfig {
    std::string endpoint;     // live mode when nonempty and fixture_dir empty
    std::string fixture_dir;  // fixture mode when nonempty (wins over endpoint)
    std::string model_id = "captioner-v1";
    std::string prompt_template_path;  // cleaner only; empty -> built-in template
    int timeout_ms = 10000;
    int max_attempts = 3;
    int backoff_start_ms = 1000;
};

class CaptionerClient {
public:
    explicit CaptionerClient(ClientConfig cfg, std::shared_ptr<Transport> transport = nullptr);
    static CaptionerClient from_env();  // TADP_CAPTION_ENDPOINT / TADP_FIXTURE_DIR

    CaptionRecord caption_image(const std::string& image_id, int min_tokens);
    bool fixture_mode() const { return !cfg_.fixture_dir.empty(); }
    int live_calls() const { return live_calls_.load(); }
    const ClientConfig& config() const { return cfg_; }

private:
    ClientConfig cfg_;
    std::shared_ptr<Transport> transport_;
    std::map<std::string, std::string> fixture_;  // image_id -> caption
    std::mutex memo_mu_;
    std::map<std::string, CaptionRecord> memo_;  // (image_id, min_tokens) -> record
    std::atomic<int> live_calls_{0};
};

class CleanerClient {
public:
    explicit CleanerClient(ClientConfig cfg, std::shared_ptr<Transport> transport = nullptr);
    static CleanerClient from_env();  // TADP_CLEANER_ENDPOINT / TADP_FIXTURE_DIR

    std::string clean_caption(const std::string& caption, const std::string& target_domain);
    bool fixture_mode() const { return !cfg_.fixture_dir.empty(); }
    int live_calls() const { return live_calls_.load(); }
    const std::string& prompt_template() const { return prompt_template_; }

private:
    struct FixtureEntry {
        std::string caption, domain, cleaned;
    };
    ClientConfig cfg_;
    std::shared_ptr<Transport> transport_;
    std::vector<FixtureEntry> fixture_;
    std::string prompt_template_;
    std::mutex memo_mu_;
    std::map<std::string, std::string> memo_;  // (caption, domain) -> cleaned
    std::atomic<int> live_calls_{0};
};

class CaptionCache {
public:
    CaptionCache(std::string dir, std::string dataset, std::string builder, int min_tokens);

    std::string path() const;
    std::optional<CaptionRecord> get(const std::string& image_id) const;
    void put(CaptionRecord rec);
    void save() const;  // sorted by image_id, atomic rename
    void load();        // merges records from an existing file, if any
    size_t size() const { return records_.size(); }
    const std::map<std::string, CaptionRecord>& records() const { return records_; }

private:
    std::string dir_, dataset_, builder_;
    int min_tokens_ = 0;
    std::map<std::string, CaptionRecord> records_;
};

struct BatchReport {
    int total = 0;
    int from_cache = 0;
    int newly_captioned = 0;
    std::vector<std::pair<std::string, std::string>> failures;  // image_id, reason
};

BatchReport batch_caption(const std::vector<std::string>& image_ids, int min_tokens,
                          CaptionerClient& client, CaptionCache& cache, int parallelism = 1);

// whitespace-token count as the conditioning tokenizer sees it (specials excluded)
int caption_token_count(const std::string& caption);

std::string default_cleaner_prompt();

}  // namespace tadp::cap
