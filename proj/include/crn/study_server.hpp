#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "crn/feature_map.hpp"
#include "crn/study.hpp"

namespace crn::study {

struct ServerOptions {
    int exclusion_threshold = 2;
    /// Served at "/" when set (the browser client bundle).
    std::optional<std::filesystem::path> static_dir;
};

/// HTTP front end of a study:
///   GET  /api/trial?session=S   next unanswered trial, or {"done": true}
///   POST /api/response          {trial_id, session, choice, response_time_ms}
///   GET  /api/report            aggregate() of the stored responses
///   GET  /images/<trial>/<left|right>.png   stimulus at 200x400
/// Duplicate responses get 409, unknown trials or sessions 404.
class StudyServer {
public:
    StudyServer(const StudyBatch& batch, ResponseStore& store, ServerOptions options = {});
    ~StudyServer();
    StudyServer(const StudyServer&) = delete;
    StudyServer& operator=(const StudyServer&) = delete;

    /// Returns the bound port, or -1.
    int bind_to_any_port(const std::string& host);
    bool bind(const std::string& host, int port);
    /// Blocks until stop().
    bool listen_after_bind();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Bilinear resample (half-pixel centers) to any size.
FeatureMap<float> resize_image(const FeatureMap<float>& image, int height, int width);

/// PNG bytes of the image at the study display size.
std::vector<std::uint8_t> display_png(const std::filesystem::path& path);

}  // namespace crn::study
