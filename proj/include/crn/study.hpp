#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "crn/errors.hpp"

namespace crn::study {

/// Timed presentations, in milliseconds: 1/8 s doubling up to 8 s.
inline constexpr int kDisplayDurations[] = {125, 250, 500, 1000, 2000, 4000, 8000};
/// Blank screen shown between consecutive trials.
inline constexpr int kBlankMs = 500;

/// Stimuli are shown at this size (height x width).
inline constexpr int kDisplayHeight = 200;
inline constexpr int kDisplayWidth = 400;

enum class Side { a, b };
enum class TimingMode { unlimited, timed };

/// Condition id -> directory of images named <layout_id>.png.
using ConditionManifest = std::map<std::string, std::filesystem::path>;

/// JSON object {condition_id: directory}; relative directories resolve
/// against the manifest's own directory.
ConditionManifest load_condition_manifest(const std::filesystem::path& path);

struct SentinelSpec {
    int count = 0;
    /// The attentive choice: the condition raters should prefer.
    std::string reference;
    /// A known-weak synthesis condition.
    std::string weak;
    /// Display time of sentinels in timed mode.
    int display_ms = 4000;
};

struct ComparisonTrial {
    std::string trial_id;
    std::string condition_a;
    std::string condition_b;
    std::string layout_id;
    std::string image_a;
    std::string image_b;
    /// Which condition is shown on the left.
    Side left = Side::a;
    std::optional<int> display_ms;
    bool sentinel = false;

    const std::string& left_image() const { return left == Side::a ? image_a : image_b; }
    const std::string& right_image() const { return left == Side::a ? image_b : image_a; }

    nlohmann::json to_json() const;
    static ComparisonTrial from_json(const nlohmann::json& j);
};

struct StudyBatch {
    std::uint64_t seed = 0;
    std::vector<ComparisonTrial> trials;

    const ComparisonTrial* find(const std::string& trial_id) const;
    int sentinel_count() const;

    nlohmann::json to_json() const;
    static StudyBatch from_json(const nlohmann::json& j);
    static StudyBatch load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

/// FNV-1a of the serialized batch (snapshot check).
std::uint64_t batch_hash(const StudyBatch& batch);

/// One trial per (condition pair, layout) plus `sentinels.count` sentinel
/// trials, shuffled by `seed` with seeded left/right assignment. Timed mode
/// draws each display time uniformly from kDisplayDurations. Throws
/// NotFoundError naming the first missing image.
StudyBatch make_batch(const ConditionManifest& conditions,
                      const std::vector<std::pair<std::string, std::string>>& pairs,
                      const std::vector<std::string>& layout_ids, const SentinelSpec& sentinels,
                      TimingMode timing, std::uint64_t seed);

enum class Choice { left, right };

struct Response {
    std::string trial_id;
    std::string session;
    Choice choice = Choice::left;
    double response_time_ms = 0.0;
    std::int64_t timestamp = 0;

    nlohmann::json to_json() const;
    /// Throws SchemaError on malformed records.
    static Response from_json(const nlohmann::json& j);
};

/// Append-only response log with exactly-once semantics per
/// (session, trial). Thread-safe.
class ResponseStore {
public:
    /// Without a path responses are kept in memory only. An existing log is
    /// replayed on construction.
    explicit ResponseStore(const StudyBatch& batch, std::optional<std::filesystem::path> log = std::nullopt);

    /// Throws NotFoundError for an unknown trial and ConflictError for a
    /// repeated (session, trial).
    void record(const Response& response);

    bool answered(const std::string& session, const std::string& trial_id) const;
    std::vector<Response> snapshot() const;
    std::size_t size() const;

private:
    void insert_locked(const Response& response);

    const StudyBatch& batch_;
    std::optional<std::filesystem::path> log_path_;
    std::ofstream log_;
    mutable std::mutex mutex_;
    std::set<std::pair<std::string, std::string>> keys_;
    std::vector<Response> responses_;
};

std::vector<Response> read_responses(const std::filesystem::path& path);

/// Exact two-sided binomial test against p = 1/2: twice the smaller tail,
/// capped at one.
double binomial_two_sided_p(int n, int k);

struct BinomialSummary {
    int n = 0;
    /// Judgments preferring the pair's first condition.
    int count = 0;
    double rate = 0.0;
    double p_value = 1.0;

    static BinomialSummary of(int n, int count);
    nlohmann::json to_json() const;
};

struct PairResult {
    std::string first;
    std::string second;
    BinomialSummary overall;
    /// Keyed by display time; nullopt is unlimited viewing.
    std::map<std::optional<int>, BinomialSummary> by_duration;
};

struct SessionSummary {
    std::string session;
    int responses = 0;
    int sentinels_answered = 0;
    int sentinels_failed = 0;
    bool excluded = false;

    double sentinel_pass_rate() const;
};

struct StudyResult {
    int exclusion_threshold = 2;
    int usable_responses = 0;
    std::vector<PairResult> pairs;
    std::vector<SessionSummary> sessions;

    nlohmann::json to_json() const;
};

/// Sessions with at least `threshold` failed sentinels, or that failed every
/// sentinel of the batch, are dropped. Throws NotFoundError when no usable
/// comparison remains.
StudyResult aggregate(const StudyBatch& batch, const std::vector<Response>& responses, int threshold = 2);

/// Pairs x preference-rate table, rates printed as percentages with one
/// decimal.
std::string render_report(const StudyResult& result);

std::string format_rate(double rate);

}  // namespace crn::study
