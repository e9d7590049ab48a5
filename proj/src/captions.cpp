#include "tadp/captions.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "tadp/error.hpp"
#include "tadp/text_encoder.hpp"

// keep the vendored server half out of the build
#define CPPHTTPLIB_NO_EXCEPTIONS
#include <httplib.h>

namespace tadp::cap {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string env_or(const char* name, const std::string& fallback = "") {
    const char* v = std::getenv(name);
    return v ? std::string(v) : fallback;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

bool contains_word(const std::string& haystack, const std::string& needle) {
    return lower(haystack).find(lower(needle)) != std::string::npos;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse_json_file(const std::string& path) {
    json j = json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw ValidationError("invalid json in " + path);
    return j;
}

json parse_response_body(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("caption") || !j["caption"].is_string()) {
        throw Error("malformed service reply: " + body.substr(0, 200));
    }
    return j;
}

Transport::Response post_with_retry(Transport& transport, const ClientConfig& cfg,
                                    const std::string& body, std::atomic<int>& live_calls) {
    std::string last_error;
    int backoff_ms = cfg.backoff_start_ms;
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
            backoff_ms *= 2;
        }
        ++live_calls;
        try {
            auto resp = transport.post(cfg.endpoint, body);
            if (resp.status == 200) return resp;
            last_error = "status " + std::to_string(resp.status) +
                         (resp.body.empty() ? "" : ": " + resp.body.substr(0, 200));
        } catch (const std::exception& e) {
            last_error = e.what();
        }
    }
    throw Error("request to " + cfg.endpoint + " failed after " + std::to_string(cfg.max_attempts) +
                " attempts: " + last_error);
}

// deterministic content-free tail so fixture captions can honor min_tokens
const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> words = {"with", "fine",    "detail", "in",    "soft",
                                                   "even", "natural", "light",  "and",   "muted",
                                                   "color", "tones",  "over",   "plain", "background"};
    return words;
}

std::string pad_to_min_tokens(std::string caption, int min_tokens) {
    const auto& filler = filler_words();
    size_t i = 0;
    while (caption_token_count(caption) < min_tokens) {
        caption += " " + filler[i % filler.size()];
        ++i;
    }
    return caption;
}

constexpr const char* kCleanerPromptTemplate =
    "Rewrite the image caption below so it no longer mentions the rendering or\n"
    "capture domain \"{DOMAIN}\" or any related style words. Describe only the\n"
    "scene content, phrased as \"an image of ...\". Reply with the rewritten\n"
    "caption and nothing else.\n"
    "\n"
    "Caption: {CAPTION}\n";

std::string replace_all(std::string text, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

}  // namespace

int caption_token_count(const std::string& caption) {
    static const text::TextEncoder counter(8, 1 << 20);
    return static_cast<int>(counter.tokenize(caption).size());
}

std::string default_cleaner_prompt() { return kCleanerPromptTemplate; }

std::string CaptionRecord::to_json_line() const {
    if (caption.empty()) throw ValidationError("caption record with empty caption");
    json j;
    j["builder"] = builder;
    j["caption"] = caption;
    j["image_id"] = image_id;
    j["min_tokens"] = min_tokens;
    j["provenance"] = provenance;
    if (modifier_id) j["modifier_id"] = *modifier_id;
    if (cleaned) j["cleaned"] = *cleaned;
    return j.dump();
}

CaptionRecord CaptionRecord::from_json_line(const std::string& line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ValidationError("bad caption record line: " + line);
    for (const char* key : {"image_id", "caption", "builder", "min_tokens", "provenance"}) {
        if (!j.contains(key)) throw ValidationError(std::string("caption record missing ") + key);
    }
    CaptionRecord rec;
    rec.image_id = j["image_id"].get<std::string>();
    rec.caption = j["caption"].get<std::string>();
    rec.builder = j["builder"].get<std::string>();
    rec.min_tokens = j["min_tokens"].get<int>();
    rec.provenance = j["provenance"].get<std::string>();
    if (j.contains("modifier_id")) rec.modifier_id = j["modifier_id"].get<std::string>();
    if (j.contains("cleaned")) rec.cleaned = j["cleaned"].get<std::string>();
    if (rec.caption.empty()) throw ValidationError("caption record with empty caption");
    if (rec.provenance != "live" && rec.provenance != "fixture") {
        throw ValidationError("caption record provenance must be live or fixture, got " + rec.provenance);
    }
    return rec;
}

Transport::Response HttpTransport::post(const std::string& endpoint, const std::string& body) {
    auto scheme_end = endpoint.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("endpoint needs a scheme: " + endpoint);
    auto path_start = endpoint.find('/', scheme_end + 3);
    std::string base = path_start == std::string::npos ? endpoint : endpoint.substr(0, path_start);
    std::string path = path_start == std::string::npos ? "/" : endpoint.substr(path_start);

    httplib::Client client(base);
    client.set_connection_timeout(0, timeout_ms_ * 1000);
    client.set_read_timeout(0, timeout_ms_ * 1000);
    auto result = client.Post(path, body, "application/json");
    if (!result) throw Error("transport error reaching " + endpoint);
    return {result->status, result->body};
}

Transport::Response CountingTransport::post(const std::string&, const std::string& body) {
    int n = ++calls_;
    {
        std::lock_guard lock(mu_);
        bodies_.push_back(body);
    }
    if (n <= fail_first_) return {503, "service unavailable"};
    return {200, reply_};
}

std::vector<std::string> CountingTransport::bodies() const {
    std::lock_guard lock(mu_);
    return bodies_;
}

CaptionerClient::CaptionerClient(ClientConfig cfg, std::shared_ptr<Transport> transport)
    : cfg_(std::move(cfg)), transport_(std::move(transport)) {
    if (cfg_.fixture_dir.empty() && cfg_.endpoint.empty()) {
        throw ValidationError("captioner needs an endpoint or a fixture dir");
    }
    if (fixture_mode()) {
        json j = parse_json_file(cfg_.fixture_dir + "/captions.json");
        if (!j.is_object()) throw ValidationError("captions.json must map image_id to caption");
        for (auto& [id, caption] : j.items()) fixture_[id] = caption.get<std::string>();
    } else if (!transport_) {
        transport_ = std::make_shared<HttpTransport>(cfg_.timeout_ms);
    }
}

CaptionerClient CaptionerClient::from_env() {
    ClientConfig cfg;
    cfg.endpoint = env_or("TADP_CAPTION_ENDPOINT");
    cfg.fixture_dir = env_or("TADP_FIXTURE_DIR");
    return CaptionerClient(cfg);
}

CaptionRecord CaptionerClient::caption_image(const std::string& image_id, int min_tokens) {
    if (image_id.empty()) throw ValidationError("empty image id");
    if (min_tokens < 0) throw ValidationError("min_tokens must be non-negative");

    const std::string memo_key = image_id + "\x1f" + std::to_string(min_tokens);
    {
        std::lock_guard lock(memo_mu_);
        if (auto it = memo_.find(memo_key); it != memo_.end()) return it->second;
    }

    CaptionRecord rec;
    rec.image_id = image_id;
    rec.min_tokens = min_tokens;
    if (fixture_mode()) {
        auto it = fixture_.find(image_id);
        if (it == fixture_.end()) throw Error("no fixture caption for image '" + image_id + "'");
        rec.caption = pad_to_min_tokens(it->second, min_tokens);
        rec.provenance = "fixture";
    } else {
        json body;
        body["image_id"] = image_id;
        body["min_tokens"] = min_tokens;
        body["model"] = cfg_.model_id;
        auto resp = post_with_retry(*transport_, cfg_, body.dump(), live_calls_);
        rec.caption = parse_response_body(resp.body)["caption"].get<std::string>();
        if (rec.caption.empty()) throw Error("captioner returned an empty caption for '" + image_id + "'");
        if (int got = caption_token_count(rec.caption); got < min_tokens) {
            throw Error("captioner returned " + std::to_string(got) + " tokens for '" + image_id +
                        "', need at least " + std::to_string(min_tokens));
        }
        rec.provenance = "live";
    }

    std::lock_guard lock(memo_mu_);
    memo_.emplace(memo_key, rec);
    return rec;
}

CleanerClient::CleanerClient(ClientConfig cfg, std::shared_ptr<Transport> transport)
    : cfg_(std::move(cfg)), transport_(std::move(transport)) {
    if (cfg_.fixture_dir.empty() && cfg_.endpoint.empty()) {
        throw ValidationError("cleaner needs an endpoint or a fixture dir");
    }
    prompt_template_ = cfg_.prompt_template_path.empty() ? default_cleaner_prompt()
                                                         : read_text_file(cfg_.prompt_template_path);
    for (const char* slot : {"{DOMAIN}", "{CAPTION}"}) {
        if (prompt_template_.find(slot) == std::string::npos) {
            throw ValidationError(std::string("cleaner prompt template lacks ") + slot);
        }
    }
    if (fixture_mode()) {
        json j = parse_json_file(cfg_.fixture_dir + "/cleaner.json");
        if (!j.is_array()) throw ValidationError("cleaner.json must be an array of rewrites");
        for (const auto& entry : j) {
            fixture_.push_back({entry.at("caption").get<std::string>(),
                                entry.at("domain").get<std::string>(),
                                entry.at("cleaned").get<std::string>()});
        }
    } else if (!transport_) {
        transport_ = std::make_shared<HttpTransport>(cfg_.timeout_ms);
    }
}

CleanerClient CleanerClient::from_env() {
    ClientConfig cfg;
    cfg.endpoint = env_or("TADP_CLEANER_ENDPOINT");
    cfg.fixture_dir = env_or("TADP_FIXTURE_DIR");
    return CleanerClient(cfg);
}

std::string CleanerClient::clean_caption(const std::string& caption, const std::string& target_domain) {
    if (caption.empty()) throw ValidationError("empty caption");
    if (target_domain.empty()) throw ValidationError("empty target domain");
    if (!contains_word(caption, target_domain)) return caption;  // nothing to remove

    const std::string memo_key = caption + "\x1f" + target_domain;
    {
        std::lock_guard lock(memo_mu_);
        if (auto it = memo_.find(memo_key); it != memo_.end()) return it->second;
    }

    std::string cleaned;
    if (fixture_mode()) {
        auto it = std::find_if(fixture_.begin(), fixture_.end(), [&](const FixtureEntry& e) {
            return e.caption == caption && e.domain == target_domain;
        });
        if (it == fixture_.end()) {
            throw Error("no cleaner fixture for caption '" + caption + "' in domain '" + target_domain +
                        "'");
        }
        cleaned = it->cleaned;
    } else {
        std::string prompt =
            replace_all(replace_all(prompt_template_, "{DOMAIN}", target_domain), "{CAPTION}", caption);
        json body;
        body["prompt"] = prompt;
        body["model"] = cfg_.model_id;
        auto resp = post_with_retry(*transport_, cfg_, body.dump(), live_calls_);
        cleaned = parse_response_body(resp.body)["caption"].get<std::string>();
        if (cleaned.empty()) throw Error("cleaner returned an empty caption");
    }

    std::lock_guard lock(memo_mu_);
    memo_.emplace(memo_key, cleaned);
    return cleaned;
}

CaptionCache::CaptionCache(std::string dir, std::string dataset, std::string builder, int min_tokens)
    : dir_(std::move(dir)), dataset_(std::move(dataset)), builder_(std::move(builder)),
      min_tokens_(min_tokens) {
    if (dir_.empty() || dataset_.empty() || builder_.empty()) {
        throw ValidationError("cache needs dir, dataset and builder names");
    }
    load();
}

std::string CaptionCache::path() const {
    return dir_ + "/captions_" + dataset_ + "_" + builder_ + "_" + std::to_string(min_tokens_) +
           ".jsonl";
}

std::optional<CaptionRecord> CaptionCache::get(const std::string& image_id) const {
    auto it = records_.find(image_id);
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

void CaptionCache::put(CaptionRecord rec) {
    if (rec.image_id.empty()) throw ValidationError("caption record needs an image id");
    records_[rec.image_id] = std::move(rec);
}

void CaptionCache::load() {
    std::ifstream in(path());
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        CaptionRecord rec = CaptionRecord::from_json_line(line);
        records_[rec.image_id] = std::move(rec);
    }
}

void CaptionCache::save() const {
    fs::create_directories(dir_);
    const std::string tmp = path() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp);
        for (const auto& [id, rec] : records_) out << rec.to_json_line() << "\n";
    }
    fs::rename(tmp, path());
}

BatchReport batch_caption(const std::vector<std::string>& image_ids, int min_tokens,
                          CaptionerClient& client, CaptionCache& cache, int parallelism) {
    if (min_tokens < 0) throw ValidationError("min_tokens must be non-negative");
    if (parallelism < 1) parallelism = 1;

    BatchReport report;
    report.total = static_cast<int>(image_ids.size());
    std::mutex mu;
    std::atomic<size_t> next{0};

    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= image_ids.size()) break;
            const std::string& id = image_ids[i];
            {
                std::lock_guard lock(mu);
                if (cache.get(id)) {
                    ++report.from_cache;
                    continue;
                }
            }
            try {
                CaptionRecord rec = client.caption_image(id, min_tokens);
                std::lock_guard lock(mu);
                cache.put(std::move(rec));
                ++report.newly_captioned;
            } catch (const std::exception& e) {
                std::lock_guard lock(mu);
                report.failures.emplace_back(id, e.what());
            }
        }
    };

    if (parallelism == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(parallelism);
        for (int i = 0; i < parallelism; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::sort(report.failures.begin(), report.failures.end());
    cache.save();
    return report;
}

}  // namespace tadp::cap
