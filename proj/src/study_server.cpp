#include "crn/study_server.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "httplib.h"

#include "crn/image_io.hpp"

namespace crn::study {

FeatureMap<float> resize_image(const FeatureMap<float>& image, int height, int width) {
    if (height <= 0 || width <= 0 || image.height <= 0 || image.width <= 0)
        throw DimensionError("resize_image: empty size");
    FeatureMap<float> out(image.channels(), height, width);
    auto source = [](int d, int in, int out_size) {
        const double s = (d + 0.5) * in / out_size - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(in - 1));
    };
    for (int y = 0; y < height; ++y) {
        const double sy = source(y, image.height, height);
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double fy = sy - y0;
        for (int x = 0; x < width; ++x) {
            const double sx = source(x, image.width, width);
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double fx = sx - x0;
            for (int c = 0; c < image.channels(); ++c) {
                const double top = (1 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1);
                const double bottom = (1 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1 - fy) * top + fy * bottom);
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> display_png(const std::filesystem::path& path) {
    const auto image = resize_image(load_rgb_image(path), kDisplayHeight, kDisplayWidth);
    return encode_png(kDisplayHeight, kDisplayWidth, 3, quantize_rgb(image));
}

struct StudyServer::Impl {
    const StudyBatch& batch;
    ResponseStore& store;
    ServerOptions options;
    httplib::Server server;

    std::mutex mutex;
    std::set<std::string> sessions;
    std::map<std::string, std::vector<std::uint8_t>> image_cache;

    Impl(const StudyBatch& b, ResponseStore& s, ServerOptions o) : batch(b), store(s), options(std::move(o)) {}

    static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& message) {
        send_json(res, status, {{"error", message}});
    }

    bool known_session(const std::string& s) {
        std::lock_guard lock(mutex);
        return sessions.count(s) > 0;
    }

    void next_trial(const httplib::Request& req, httplib::Response& res) {
        const std::string session = req.get_param_value("session");
        if (session.empty()) return send_error(res, 400, "missing session parameter");
        {
            std::lock_guard lock(mutex);
            sessions.insert(session);
        }
        for (std::size_t i = 0; i < batch.trials.size(); ++i) {
            const auto& t = batch.trials[i];
            if (store.answered(session, t.trial_id)) continue;
            nlohmann::json j{{"trial_id", t.trial_id},
                             {"left_url", "/images/" + t.trial_id + "/left.png"},
                             {"right_url", "/images/" + t.trial_id + "/right.png"},
                             {"index", i},
                             {"blank_ms", kBlankMs},
                             {"total", batch.trials.size()}};
            j["display_ms"] = t.display_ms ? nlohmann::json(*t.display_ms) : nlohmann::json(nullptr);
            return send_json(res, 200, j);
        }
        send_json(res, 200, {{"done", true}, {"session", session}, {"total", batch.trials.size()}});
    }

    void post_response(const httplib::Request& req, httplib::Response& res) {
        Response r;
        try {
            auto j = nlohmann::json::parse(req.body);
            if (!j.contains("timestamp"))
                j["timestamp"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                                     std::chrono::system_clock::now().time_since_epoch())
                                     .count();
            r = Response::from_json(j);
        } catch (const nlohmann::json::exception& e) {
            return send_error(res, 400, std::string("malformed JSON: ") + e.what());
        } catch (const SchemaError& e) {
            return send_error(res, 400, e.what());
        }
        if (!known_session(r.session)) return send_error(res, 404, "unknown session \"" + r.session + "\"");
        try {
            store.record(r);
        } catch (const ConflictError& e) {
            return send_error(res, 409, e.what());
        } catch (const NotFoundError& e) {
            return send_error(res, 404, e.what());
        }
        send_json(res, 200, {{"ok", true}, {"trial_id", r.trial_id}});
    }

    void report(httplib::Response& res) {
        try {
            send_json(res, 200, aggregate(batch, store.snapshot(), options.exclusion_threshold).to_json());
        } catch (const NotFoundError& e) {
            send_error(res, 404, e.what());
        }
    }

    void image(const httplib::Request& req, httplib::Response& res) {
        const std::string trial_id = req.matches[1];
        const std::string side = req.matches[2];
        const ComparisonTrial* t = batch.find(trial_id);
        if (!t) return send_error(res, 404, "unknown trial \"" + trial_id + "\"");
        const std::string path = side == "left" ? t->left_image() : t->right_image();
        std::vector<std::uint8_t> bytes;
        {
            std::lock_guard lock(mutex);
            auto it = image_cache.find(path);
            if (it != image_cache.end()) bytes = it->second;
        }
        if (bytes.empty()) {
            try {
                bytes = display_png(path);
            } catch (const Error& e) {
                return send_error(res, 500, e.what());
            }
            std::lock_guard lock(mutex);
            image_cache[path] = bytes;
        }
        res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/png");
    }
};

StudyServer::StudyServer(const StudyBatch& batch, ResponseStore& store, ServerOptions options)
    : impl_(std::make_unique<Impl>(batch, store, std::move(options))) {
    auto& s = impl_->server;
    Impl* impl = impl_.get();
    s.Get("/api/trial", [impl](const httplib::Request& req, httplib::Response& res) { impl->next_trial(req, res); });
    s.Post("/api/response",
           [impl](const httplib::Request& req, httplib::Response& res) { impl->post_response(req, res); });
    s.Get("/api/report", [impl](const httplib::Request&, httplib::Response& res) { impl->report(res); });
    s.Get(R"(/images/([A-Za-z0-9_\-]+)/(left|right)\.png)",
          [impl](const httplib::Request& req, httplib::Response& res) { impl->image(req, res); });
    if (impl_->options.static_dir && !s.set_mount_point("/", impl_->options.static_dir->string()))
        throw IoError("cannot serve static directory " + impl_->options.static_dir->string());
}

StudyServer::~StudyServer() { stop(); }

int StudyServer::bind_to_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool StudyServer::bind(const std::string& host, int port) { return impl_->server.bind_to_port(host, port); }

bool StudyServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void StudyServer::stop() {
    if (impl_) impl_->server.stop();
}

void StudyServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace crn::study
