#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tadp/captions.hpp"
#include "tadp/error.hpp"

using namespace tadp;
using namespace tadp::cap;
namespace fs = std::filesystem;

namespace {

const char* kFixtureDir = TADP_SOURCE_DIR "/fixtures";
const char* kPromptPath = TADP_SOURCE_DIR "/data/cleaner_prompt.txt";

ClientConfig fixture_config() {
    ClientConfig cfg;
    cfg.fixture_dir = kFixtureDir;
    return cfg;
}

ClientConfig live_config(int max_attempts = 3) {
    ClientConfig cfg;
    cfg.endpoint = "http://127.0.0.1:1/caption";
    cfg.max_attempts = max_attempts;
    cfg.backoff_start_ms = 1;  // keep retry tests fast
    return cfg;
}

std::string fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> scene_ids(int n) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "scene_%03d", i);
        ids.emplace_back(buf);
    }
    return ids;
}

std::string caption_reply(const std::string& text) {
    return "{\"caption\": \"" + text + "\"}";
}

}  // namespace

TEST_CASE("caption records serialize to stable json lines") {
    CaptionRecord rec;
    rec.image_id = "img_7";
    rec.caption = "a bird and a dog";
    rec.builder = "caption";
    rec.min_tokens = 20;
    rec.provenance = "fixture";

    std::string line = rec.to_json_line();
    CHECK(line.find('\n') == std::string::npos);
    CHECK(line.find("\"modifier_id\"") == std::string::npos);
    CHECK(line.find("\"cleaned\"") == std::string::npos);

    CaptionRecord back = CaptionRecord::from_json_line(line);
    CHECK(back.image_id == rec.image_id);
    CHECK(back.caption == rec.caption);
    CHECK(back.builder == rec.builder);
    CHECK(back.min_tokens == rec.min_tokens);
    CHECK(back.provenance == rec.provenance);
    CHECK_FALSE(back.modifier_id.has_value());
    CHECK_FALSE(back.cleaned.has_value());

    rec.modifier_id = "watercolor";
    rec.cleaned = "an image of a bird and a dog";
    CaptionRecord full = CaptionRecord::from_json_line(rec.to_json_line());
    CHECK(full.modifier_id == rec.modifier_id);
    CHECK(full.cleaned == rec.cleaned);
    CHECK(rec.to_json_line() == rec.to_json_line());

    CHECK_THROWS_AS(CaptionRecord::from_json_line("not json"), ValidationError);
    CHECK_THROWS_AS(CaptionRecord::from_json_line("{\"image_id\": \"a\"}"), ValidationError);
    CaptionRecord bad = rec;
    bad.caption = "";
    CHECK_THROWS_AS(bad.to_json_line(), ValidationError);
}

TEST_CASE("fixture captioner serves the bundled captions") {
    auto transport = std::make_shared<CountingTransport>();
    CaptionerClient client(fixture_config(), transport);
    CHECK(client.fixture_mode());

    CaptionRecord rec = client.caption_image("dog_bird", 0);
    CHECK(rec.caption == "a bird and a dog");
    CHECK(rec.image_id == "dog_bird");
    CHECK(rec.provenance == "fixture");
    CHECK(rec.builder == "caption");
    CHECK(rec.min_tokens == 0);

    CHECK_THROWS_WITH_AS(client.caption_image("no_such_image", 0),
                         doctest::Contains("no_such_image"), Error);

    // fixture mode stays off the wire even with a transport wired in
    (void)client.caption_image("scene_000", 0);
    CHECK(transport->calls() == 0);
    CHECK(client.live_calls() == 0);
}

TEST_CASE("fixture captions honor the minimum token count") {
    CaptionerClient client(fixture_config());

    CaptionRecord plain = client.caption_image("dog_bird", 0);
    CHECK(caption_token_count(plain.caption) == 5);

    CaptionRecord padded = client.caption_image("dog_bird", 40);
    CHECK(caption_token_count(padded.caption) >= 40);
    CHECK(padded.caption.rfind("a bird and a dog", 0) == 0);
    CHECK(padded.min_tokens == 40);

    CaptionerClient twin(fixture_config());
    CHECK(twin.caption_image("dog_bird", 40).caption == padded.caption);

    CaptionRecord mid = client.caption_image("dog_bird", 20);
    CHECK(caption_token_count(mid.caption) >= 20);
    CHECK(caption_token_count(mid.caption) < caption_token_count(padded.caption));

    CHECK_THROWS_AS(client.caption_image("dog_bird", -1), ValidationError);
    CHECK_THROWS_AS(client.caption_image("", 0), ValidationError);
}

TEST_CASE("live captioner memoizes and validates replies") {
    auto transport = std::make_shared<CountingTransport>(caption_reply("a small test caption"));
    CaptionerClient client(live_config(), transport);
    CHECK_FALSE(client.fixture_mode());

    CaptionRecord rec = client.caption_image("img_1", 0);
    CHECK(rec.caption == "a small test caption");
    CHECK(rec.provenance == "live");
    CHECK(client.live_calls() == 1);

    // repeat is served from the client-side record cache
    (void)client.caption_image("img_1", 0);
    CHECK(client.live_calls() == 1);

    // a different min_tokens is a different request key
    CHECK_THROWS_WITH_AS(client.caption_image("img_1", 40), doctest::Contains("need at least 40"),
                         Error);
    CHECK(client.live_calls() == 2);

    auto broken = std::make_shared<CountingTransport>("{\"surprise\": 1}");
    CaptionerClient bad(live_config(1), broken);
    CHECK_THROWS_WITH_AS(bad.caption_image("img_2", 0), doctest::Contains("malformed"), Error);
}

TEST_CASE("transport failures are retried with backoff then surfaced") {
    auto flaky = std::make_shared<CountingTransport>(caption_reply("a recovered caption"), 2);
    CaptionerClient client(live_config(), flaky);
    CaptionRecord rec = client.caption_image("img_1", 0);
    CHECK(rec.caption == "a recovered caption");
    CHECK(flaky->calls() == 3);
    CHECK(client.live_calls() == 3);

    auto down = std::make_shared<CountingTransport>(caption_reply("never seen"), 99);
    CaptionerClient doomed(live_config(), down);
    CHECK_THROWS_WITH_AS(doomed.caption_image("img_1", 0),
                         doctest::Contains("failed after 3 attempts"), Error);
    CHECK(down->calls() == 3);
}

TEST_CASE("cleaner removes domain mentions via the fixture table") {
    auto transport = std::make_shared<CountingTransport>();
    CleanerClient client(fixture_config(), transport);

    CHECK(client.clean_caption("a watercolor painting of a dog and a bird", "watercolor") ==
          "an image of a bird and a dog");
    CHECK(client.clean_caption("a dark night photo of a car on a street", "night") ==
          "an image of a car on a street");

    // nothing to remove -> unchanged, no lookup at all
    std::string plain = "a bird and a dog";
    CHECK(client.clean_caption(plain, "watercolor") == plain);
    CHECK(client.clean_caption(plain, "watercolor").find("watercolor") == std::string::npos);

    CHECK_THROWS_WITH_AS(client.clean_caption("an odd watercolor scene", "watercolor"),
                         doctest::Contains("no cleaner fixture"), Error);
    CHECK_THROWS_AS(client.clean_caption("", "watercolor"), ValidationError);
    CHECK_THROWS_AS(client.clean_caption("a caption", ""), ValidationError);
    CHECK(transport->calls() == 0);
    CHECK(client.live_calls() == 0);
}

TEST_CASE("captioner output chains into the cleaner") {
    CaptionerClient captioner(fixture_config());
    CleanerClient cleaner(fixture_config());
    CaptionRecord rec = captioner.caption_image("watercolor_dog_bird", 0);
    CHECK(rec.caption == "a watercolor painting of a dog and a bird");
    CHECK(cleaner.clean_caption(rec.caption, "watercolor") == "an image of a bird and a dog");
}

TEST_CASE("live cleaner renders the prompt template and memoizes") {
    auto transport = std::make_shared<CountingTransport>(caption_reply("an image of a harbor"));
    ClientConfig cfg = live_config();
    cfg.prompt_template_path = kPromptPath;
    CleanerClient client(cfg, transport);

    std::string in = "a pixel art drawing of a harbor";
    CHECK(client.clean_caption(in, "pixel art") == "an image of a harbor");
    CHECK(client.live_calls() == 1);

    auto bodies = transport->bodies();
    REQUIRE(bodies.size() == 1);
    CHECK(bodies[0].find("pixel art") != std::string::npos);
    CHECK(bodies[0].find("a pixel art drawing of a harbor") != std::string::npos);
    CHECK(bodies[0].find("{DOMAIN}") == std::string::npos);
    CHECK(bodies[0].find("{CAPTION}") == std::string::npos);

    // cache hit on repeat -> no second call
    CHECK(client.clean_caption(in, "pixel art") == "an image of a harbor");
    CHECK(client.live_calls() == 1);

    // the shipped template file matches the built-in fallback
    CHECK(read_file(kPromptPath) == default_cleaner_prompt());
    CHECK(client.prompt_template() == default_cleaner_prompt());
}

TEST_CASE("caption cache files are sorted, stable and reloadable") {
    std::string dir = fresh_dir("tadp_cap_cache");
    CaptionCache cache(dir, "demo", "caption", 20);
    CHECK(cache.path() == dir + "/captions_demo_caption_20.jsonl");

    for (const char* id : {"zebra", "apple", "mango"}) {
        CaptionRecord rec;
        rec.image_id = id;
        rec.caption = std::string("a photo of a ") + id;
        rec.min_tokens = 20;
        rec.provenance = "fixture";
        cache.put(rec);
    }
    cache.save();

    std::string first = read_file(cache.path());
    auto apple = first.find("apple");
    auto mango = first.find("mango");
    auto zebra = first.find("zebra");
    CHECK(apple < mango);
    CHECK(mango < zebra);
    CHECK_FALSE(fs::exists(cache.path() + ".tmp"));

    cache.save();
    CHECK(read_file(cache.path()) == first);

    CaptionCache reload(dir, "demo", "caption", 20);
    CHECK(reload.size() == 3);
    auto hit = reload.get("mango");
    REQUIRE(hit.has_value());
    CHECK(hit->caption == "a photo of a mango");
    CHECK_FALSE(reload.get("kiwi").has_value());
}

TEST_CASE("batch captioning fills the cache then resumes from it") {
    std::string dir = fresh_dir("tadp_cap_batch");
    auto ids = scene_ids(16);

    auto transport = std::make_shared<CountingTransport>(caption_reply("a stand-in caption"));
    {
        CaptionerClient client(live_config(), transport);
        CaptionCache cache(dir, "demo", "caption", 0);
        BatchReport report = batch_caption(ids, 0, client, cache, 1);
        CHECK(report.total == 16);
        CHECK(report.newly_captioned == 16);
        CHECK(report.from_cache == 0);
        CHECK(report.failures.empty());
        CHECK(transport->calls() == 16);
        CHECK(fs::exists(cache.path()));
    }
    {
        // fresh client, same cache dir: everything resumes without a single call
        auto transport2 = std::make_shared<CountingTransport>(caption_reply("unused"));
        CaptionerClient client(live_config(), transport2);
        CaptionCache cache(dir, "demo", "caption", 0);
        BatchReport report = batch_caption(ids, 0, client, cache, 1);
        CHECK(report.total == 16);
        CHECK(report.newly_captioned == 0);
        CHECK(report.from_cache == 16);
        CHECK(transport2->calls() == 0);
    }
}

TEST_CASE("batch captioning reports per-image failures") {
    std::string dir = fresh_dir("tadp_cap_fail");
    auto ids = scene_ids(15);
    ids.push_back("img_unlisted");

    CaptionerClient client(fixture_config());
    CaptionCache cache(dir, "demo", "caption", 0);
    BatchReport report = batch_caption(ids, 0, client, cache, 1);
    CHECK(report.total == 16);
    CHECK(report.newly_captioned == 15);
    CHECK(report.from_cache == 0);
    REQUIRE(report.failures.size() == 1);
    CHECK(report.failures[0].first == "img_unlisted");
    CHECK(report.failures[0].second.find("img_unlisted") != std::string::npos);
    CHECK(cache.size() == 15);

    // the failed id is retried on the next run, the rest come from cache
    CaptionCache reload(dir, "demo", "caption", 0);
    BatchReport again = batch_caption(ids, 0, client, reload, 1);
    CHECK(again.from_cache == 15);
    CHECK(again.failures.size() == 1);
}

TEST_CASE("parallel and serial batches write byte-identical caches") {
    auto ids = scene_ids(16);

    std::string serial_dir = fresh_dir("tadp_cap_serial");
    CaptionerClient serial_client(fixture_config());
    CaptionCache serial_cache(serial_dir, "demo", "caption", 20);
    BatchReport serial = batch_caption(ids, 20, serial_client, serial_cache, 1);
    CHECK(serial.newly_captioned == 16);

    std::string par_dir = fresh_dir("tadp_cap_parallel");
    CaptionerClient par_client(fixture_config());
    CaptionCache par_cache(par_dir, "demo", "caption", 20);
    BatchReport par = batch_caption(ids, 20, par_client, par_cache, 4);
    CHECK(par.newly_captioned == 16);

    CHECK(read_file(serial_cache.path()) == read_file(par_cache.path()));
}

TEST_CASE("environment variables pick fixture mode") {
    setenv("TADP_FIXTURE_DIR", kFixtureDir, 1);
    setenv("TADP_CAPTION_ENDPOINT", "http://127.0.0.1:1/caption", 1);
    setenv("TADP_CLEANER_ENDPOINT", "http://127.0.0.1:1/clean", 1);
    auto captioner = CaptionerClient::from_env();
    auto cleaner = CleanerClient::from_env();
    CHECK(captioner.fixture_mode());  // fixture dir wins over the endpoint
    CHECK(cleaner.fixture_mode());
    CHECK(captioner.caption_image("dog_bird", 0).caption == "a bird and a dog");

    unsetenv("TADP_FIXTURE_DIR");
    auto live = CaptionerClient::from_env();
    CHECK_FALSE(live.fixture_mode());
    unsetenv("TADP_CAPTION_ENDPOINT");
    unsetenv("TADP_CLEANER_ENDPOINT");
    CHECK_THROWS_AS(CaptionerClient::from_env(), ValidationError);
}
