#include "crn/study.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace crn::study {

namespace {

std::string side_name(Side s) { return s == Side::a ? "a" : "b"; }

Side side_from(const std::string& s) {
    if (s == "a") return Side::a;
    if (s == "b") return Side::b;
    throw SchemaError("trial: left must be \"a\" or \"b\", got \"" + s + "\"");
}

/// Uniform index in [0, n) from one 64-bit draw; spelled out so batches do
/// not depend on the standard library's distribution algorithms.
std::size_t draw_index(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

}  // namespace

ConditionManifest load_condition_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open condition manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("condition manifest " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw SchemaError("condition manifest must be a JSON object of id -> directory");
    ConditionManifest m;
    for (const auto& [id, dir] : j.items()) {
        if (!dir.is_string()) throw SchemaError("condition \"" + id + "\": directory must be a string");
        std::filesystem::path p = dir.get<std::string>();
        m[id] = p.is_absolute() ? p : path.parent_path() / p;
    }
    return m;
}

// ----------------------------------------------------------------------------
// Trials and batches
// ----------------------------------------------------------------------------

nlohmann::json ComparisonTrial::to_json() const {
    nlohmann::json j{{"trial_id", trial_id}, {"condition_a", condition_a}, {"condition_b", condition_b},
                     {"layout_id", layout_id}, {"image_a", image_a},       {"image_b", image_b},
                     {"left", side_name(left)}, {"sentinel", sentinel}};
    j["display_ms"] = display_ms ? nlohmann::json(*display_ms) : nlohmann::json(nullptr);
    return j;
}

ComparisonTrial ComparisonTrial::from_json(const nlohmann::json& j) {
    ComparisonTrial t;
    try {
        t.trial_id = j.at("trial_id").get<std::string>();
        t.condition_a = j.at("condition_a").get<std::string>();
        t.condition_b = j.at("condition_b").get<std::string>();
        t.layout_id = j.at("layout_id").get<std::string>();
        t.image_a = j.at("image_a").get<std::string>();
        t.image_b = j.at("image_b").get<std::string>();
        t.left = side_from(j.at("left").get<std::string>());
        t.sentinel = j.at("sentinel").get<bool>();
        if (!j.at("display_ms").is_null()) t.display_ms = j.at("display_ms").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("trial: ") + e.what());
    }
    return t;
}

const ComparisonTrial* StudyBatch::find(const std::string& trial_id) const {
    for (const auto& t : trials)
        if (t.trial_id == trial_id) return &t;
    return nullptr;
}

int StudyBatch::sentinel_count() const {
    return static_cast<int>(std::count_if(trials.begin(), trials.end(), [](const auto& t) { return t.sentinel; }));
}

nlohmann::json StudyBatch::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : trials) arr.push_back(t.to_json());
    return {{"seed", seed}, {"trials", arr}};
}

StudyBatch StudyBatch::from_json(const nlohmann::json& j) {
    StudyBatch b;
    try {
        b.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& t : j.at("trials")) b.trials.push_back(ComparisonTrial::from_json(t));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("batch: ") + e.what());
    }
    std::set<std::string> ids;
    for (const auto& t : b.trials)
        if (!ids.insert(t.trial_id).second) throw SchemaError("batch: duplicate trial id " + t.trial_id);
    return b;
}

StudyBatch StudyBatch::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open batch file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("batch " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

void StudyBatch::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write batch file " + path.string());
    out << to_json().dump(2) << '\n';
}

std::uint64_t batch_hash(const StudyBatch& batch) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : batch.to_json().dump()) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

StudyBatch make_batch(const ConditionManifest& conditions,
                      const std::vector<std::pair<std::string, std::string>>& pairs,
                      const std::vector<std::string>& layout_ids, const SentinelSpec& sentinels,
                      TimingMode timing, std::uint64_t seed) {
    if (layout_ids.empty()) throw ArgumentError("make_batch: no layouts");
    if (sentinels.count < 0) throw ArgumentError("make_batch: negative sentinel count");
    auto image = [&conditions](const std::string& condition, const std::string& layout) {
        const auto it = conditions.find(condition);
        if (it == conditions.end()) throw NotFoundError("make_batch: unknown condition \"" + condition + "\"");
        const auto path = it->second / (layout + ".png");
        if (!std::filesystem::is_regular_file(path))
            throw NotFoundError("make_batch: condition \"" + condition + "\" has no image for layout \"" + layout +
                                "\" (" + path.string() + ")");
        return path.string();
    };

    std::vector<ComparisonTrial> trials;
    for (const auto& [a, b] : pairs) {
        if (a == b) throw ArgumentError("make_batch: condition \"" + a + "\" paired with itself");
        for (const auto& layout : layout_ids) {
            ComparisonTrial t;
            t.condition_a = a;
            t.condition_b = b;
            t.layout_id = layout;
            t.image_a = image(a, layout);
            t.image_b = image(b, layout);
            trials.push_back(std::move(t));
        }
    }

    std::mt19937_64 rng(seed);
    for (int s = 0; s < sentinels.count; ++s) {
        ComparisonTrial t;
        t.sentinel = true;
        t.condition_a = sentinels.reference;
        t.condition_b = sentinels.weak;
        t.layout_id = layout_ids[draw_index(rng, layout_ids.size())];
        t.image_a = image(t.condition_a, t.layout_id);
        t.image_b = image(t.condition_b, t.layout_id);
        trials.push_back(std::move(t));
    }

    for (std::size_t i = trials.size(); i > 1; --i) std::swap(trials[i - 1], trials[draw_index(rng, i)]);

    StudyBatch batch;
    batch.seed = seed;
    int index = 0;
    for (auto& t : trials) {
        t.left = (rng() & 1u) ? Side::b : Side::a;
        if (timing == TimingMode::timed) {
            const int drawn = kDisplayDurations[draw_index(rng, std::size(kDisplayDurations))];
            t.display_ms = t.sentinel ? sentinels.display_ms : drawn;
        }
        char id[16];
        std::snprintf(id, sizeof(id), "t%04d", index++);
        t.trial_id = id;
        batch.trials.push_back(std::move(t));
    }
    return batch;
}

// ----------------------------------------------------------------------------
// Responses
// ----------------------------------------------------------------------------

nlohmann::json Response::to_json() const {
    return {{"trial_id", trial_id},
            {"session", session},
            {"choice", choice == Choice::left ? "left" : "right"},
            {"response_time_ms", response_time_ms},
            {"timestamp", timestamp}};
}

Response Response::from_json(const nlohmann::json& j) {
    Response r;
    try {
        r.trial_id = j.at("trial_id").get<std::string>();
        r.session = j.at("session").get<std::string>();
        const auto choice = j.at("choice").get<std::string>();
        if (choice == "left")
            r.choice = Choice::left;
        else if (choice == "right")
            r.choice = Choice::right;
        else
            throw SchemaError("response: choice must be \"left\" or \"right\", got \"" + choice + "\"");
        if (j.contains("response_time_ms")) r.response_time_ms = j.at("response_time_ms").get<double>();
        if (j.contains("timestamp")) r.timestamp = j.at("timestamp").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("response: ") + e.what());
    }
    if (r.session.empty()) throw SchemaError("response: empty session id");
    return r;
}

ResponseStore::ResponseStore(const StudyBatch& batch, std::optional<std::filesystem::path> log)
    : batch_(batch), log_path_(std::move(log)) {
    if (!log_path_) return;
    if (std::filesystem::exists(*log_path_))
        for (const auto& r : read_responses(*log_path_)) insert_locked(r);
    log_.open(*log_path_, std::ios::app);
    if (!log_) throw IoError("cannot open response log " + log_path_->string());
}

void ResponseStore::insert_locked(const Response& response) {
    if (!batch_.find(response.trial_id)) throw NotFoundError("unknown trial \"" + response.trial_id + "\"");
    if (!keys_.emplace(response.session, response.trial_id).second)
        throw ConflictError("session \"" + response.session + "\" already answered trial \"" + response.trial_id +
                            "\"");
    responses_.push_back(response);
}

void ResponseStore::record(const Response& response) {
    std::lock_guard lock(mutex_);
    insert_locked(response);
    if (log_.is_open()) {
        log_ << response.to_json().dump() << '\n';
        log_.flush();
    }
}

bool ResponseStore::answered(const std::string& session, const std::string& trial_id) const {
    std::lock_guard lock(mutex_);
    return keys_.count({session, trial_id}) > 0;
}

std::vector<Response> ResponseStore::snapshot() const {
    std::lock_guard lock(mutex_);
    return responses_;
}

std::size_t ResponseStore::size() const {
    std::lock_guard lock(mutex_);
    return responses_.size();
}

std::vector<Response> read_responses(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open response log " + path.string());
    std::vector<Response> out;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(Response::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

// ----------------------------------------------------------------------------
// Statistics
// ----------------------------------------------------------------------------

double binomial_two_sided_p(int n, int k) {
    if (n < 0 || k < 0 || k > n) throw ArgumentError("binomial test: need 0 <= k <= n");
    if (n == 0) return 1.0;
    const long double log_half_n = static_cast<long double>(n) * std::log(0.5L);
    auto pmf = [&](int i) {
        return std::exp(std::lgamma(static_cast<long double>(n) + 1) - std::lgamma(static_cast<long double>(i) + 1) -
                        std::lgamma(static_cast<long double>(n - i) + 1) + log_half_n);
    };
    // Sum each tail from its far end so small terms are added first.
    long double lower = 0, upper = 0;
    for (int i = 0; i <= k; ++i) lower += pmf(i);
    for (int i = n; i >= k; --i) upper += pmf(i);
    const long double p = 2 * std::min(lower, upper);
    return static_cast<double>(std::min<long double>(1, p));
}

BinomialSummary BinomialSummary::of(int n, int count) {
    BinomialSummary s;
    s.n = n;
    s.count = count;
    s.rate = n > 0 ? static_cast<double>(count) / n : 0.0;
    s.p_value = binomial_two_sided_p(n, count);
    return s;
}

nlohmann::json BinomialSummary::to_json() const {
    return {{"n", n}, {"count", count}, {"rate", rate}, {"p_value", p_value}};
}

double SessionSummary::sentinel_pass_rate() const {
    if (sentinels_answered == 0) return 1.0;
    return static_cast<double>(sentinels_answered - sentinels_failed) / sentinels_answered;
}

nlohmann::json StudyResult::to_json() const {
    nlohmann::json pj = nlohmann::json::array();
    for (const auto& p : pairs) {
        nlohmann::json durations = nlohmann::json::array();
        for (const auto& [ms, s] : p.by_duration) {
            nlohmann::json d = s.to_json();
            d["display_ms"] = ms ? nlohmann::json(*ms) : nlohmann::json(nullptr);
            durations.push_back(d);
        }
        nlohmann::json entry = p.overall.to_json();
        entry["first"] = p.first;
        entry["second"] = p.second;
        entry["by_duration"] = durations;
        pj.push_back(entry);
    }
    nlohmann::json sj = nlohmann::json::array();
    for (const auto& s : sessions)
        sj.push_back({{"session", s.session},
                      {"responses", s.responses},
                      {"sentinels_answered", s.sentinels_answered},
                      {"sentinels_failed", s.sentinels_failed},
                      {"sentinel_pass_rate", s.sentinel_pass_rate()},
                      {"excluded", s.excluded}});
    return {{"exclusion_threshold", exclusion_threshold},
            {"usable_responses", usable_responses},
            {"pairs", pj},
            {"sessions", sj}};
}

StudyResult aggregate(const StudyBatch& batch, const std::vector<Response>& responses, int threshold) {
    if (threshold < 1) throw ArgumentError("aggregate: exclusion threshold must be >= 1");
    struct Judgment {
        const ComparisonTrial* trial;
        bool chose_a;
    };
    std::map<std::string, SessionSummary> sessions;
    std::map<std::string, std::vector<Judgment>> by_session;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& r : responses) {
        const ComparisonTrial* t = batch.find(r.trial_id);
        if (!t) throw NotFoundError("aggregate: response for unknown trial \"" + r.trial_id + "\"");
        if (!seen.emplace(r.session, r.trial_id).second)
            throw ConflictError("aggregate: duplicate response from \"" + r.session + "\" to \"" + r.trial_id + "\"");
        const Side chosen = r.choice == Choice::left ? t->left : (t->left == Side::a ? Side::b : Side::a);
        auto& s = sessions[r.session];
        s.session = r.session;
        ++s.responses;
        if (t->sentinel) {
            ++s.sentinels_answered;
            if (chosen != Side::a) ++s.sentinels_failed;
        }
        by_session[r.session].push_back({t, chosen == Side::a});
    }

    const int batch_sentinels = batch.sentinel_count();
    StudyResult result;
    result.exclusion_threshold = threshold;
    std::map<std::pair<std::string, std::string>, std::map<std::optional<int>, std::pair<int, int>>> tallies;
    for (auto& [id, s] : sessions) {
        s.excluded = s.sentinels_failed >= threshold ||
                     (s.sentinels_failed > 0 && s.sentinels_failed == batch_sentinels);
        result.sessions.push_back(s);
        if (s.excluded) continue;
        for (const auto& j : by_session[id]) {
            if (j.trial->sentinel) continue;
            auto& cell = tallies[{j.trial->condition_a, j.trial->condition_b}][j.trial->display_ms];
            ++cell.first;
            if (j.chose_a) ++cell.second;
            ++result.usable_responses;
        }
    }
    if (result.usable_responses == 0) throw NotFoundError("aggregate: no usable responses");

    for (const auto& [key, cells] : tallies) {
        PairResult p;
        p.first = key.first;
        p.second = key.second;
        int n = 0, count = 0;
        for (const auto& [ms, c] : cells) {
            p.by_duration[ms] = BinomialSummary::of(c.first, c.second);
            n += c.first;
            count += c.second;
        }
        p.overall = BinomialSummary::of(n, count);
        result.pairs.push_back(std::move(p));
    }
    return result;
}

std::string format_rate(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f%%", rate * 100.0);
    return buf;
}

namespace {

std::string format_p(double p) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", p);
    return buf;
}

std::string pad(const std::string& s, std::size_t width) {
    return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

}  // namespace

std::string render_report(const StudyResult& result) {
    std::size_t w = 8;
    for (const auto& p : result.pairs) w = std::max(w, p.first.size() + p.second.size() + 5);
    std::ostringstream out;
    out << pad("pair", w + 2) << pad("n", 8) << pad("preferred", 11) << pad("rate", 8) << "p-value\n";
    for (const auto& p : result.pairs) {
        out << pad(p.first + " > " + p.second, w + 2) << pad(std::to_string(p.overall.n), 8)
            << pad(std::to_string(p.overall.count), 11) << pad(format_rate(p.overall.rate), 8)
            << format_p(p.overall.p_value) << (p.overall.p_value < 1e-3 ? "  *" : "") << '\n';
    }
    bool timed = false;
    for (const auto& p : result.pairs)
        for (const auto& [ms, s] : p.by_duration)
            if (ms) timed = true;
    if (timed) {
        out << "\nby display time\n";
        for (const auto& p : result.pairs)
            for (const auto& [ms, s] : p.by_duration)
                out << pad(p.first + " > " + p.second, w + 2) << pad(ms ? std::to_string(*ms) + " ms" : "unlimited", 12)
                    << pad(std::to_string(s.n), 8) << pad(format_rate(s.rate), 8) << format_p(s.p_value) << '\n';
    }
    int excluded = 0;
    for (const auto& s : result.sessions) excluded += s.excluded ? 1 : 0;
    out << "\nsessions: " << result.sessions.size() << " (" << excluded << " excluded at >= "
        << result.exclusion_threshold << " failed sentinels), usable judgments: " << result.usable_responses
        << "\n* p < 1e-3\n";
    return out.str();
}

}  // namespace crn::study
