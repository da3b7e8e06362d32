#include "crn/models.hpp"

#include "crn/archive.hpp"

namespace crn {

template <typename Scalar>
std::unique_ptr<Generator<Scalar>> make_generator(const std::string& kind, const nlohmann::json& config) {
    if (kind == "crn") return std::make_unique<CascadeModel<Scalar>>(CascadeConfig::from_json(config));
    if (kind == "fullres") return std::make_unique<FullResNet<Scalar>>(FullResConfig::from_json(config));
    if (kind == "encdec")
        return std::make_unique<EncoderDecoder<Scalar>>(EncoderDecoderConfig::from_json(config));
    throw ConfigError("unknown model kind \"" + kind + "\" (expected crn, fullres or encdec)");
}

std::int64_t param_count(const std::string& kind, const nlohmann::json& config) {
    if (kind == "crn") return param_count(CascadeConfig::from_json(config));
    if (kind == "fullres") return param_count(FullResConfig::from_json(config));
    if (kind == "encdec") return param_count(EncoderDecoderConfig::from_json(config));
    throw ConfigError("unknown model kind \"" + kind + "\" (expected crn, fullres or encdec)");
}

nlohmann::json CheckpointHeader::to_json() const {
    return {{"kind", kind}, {"config", config}, {"step", step}, {"seed", seed}};
}

CheckpointHeader CheckpointHeader::from_json(const nlohmann::json& j) {
    CheckpointHeader h;
    try {
        h.kind = j.at("kind").get<std::string>();
        h.config = j.at("config");
        h.step = j.at("step").get<std::int64_t>();
        h.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("checkpoint header: ") + e.what());
    }
    return h;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& dir, const Generator<Scalar>& model, std::int64_t step,
                     std::uint64_t seed) {
    const CheckpointHeader h{model.kind(), model.config_json(), step, seed};
    write_archive(dir, h.to_json(), model.parameters());
}

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::filesystem::path& dir) {
    WeightArchive archive = read_archive(dir);
    LoadedCheckpoint<Scalar> out;
    out.header = CheckpointHeader::from_json(archive.header);
    try {
        out.model = make_generator<Scalar>(out.header.kind, out.header.config);
    } catch (const ConfigError& e) {
        throw SchemaError(std::string("checkpoint header: ") + e.what());
    }
    assign_tensors(archive.tensors, out.model->parameters());
    if (archive.tensors.size() != out.model->parameters().size())
        throw SchemaError("checkpoint holds " + std::to_string(archive.tensors.size()) + " tensors, model expects " +
                          std::to_string(out.model->parameters().size()));
    return out;
}

#define CRN_INSTANTIATE_MODELS(S)                                                                            \
    template std::unique_ptr<Generator<S>> make_generator<S>(const std::string&, const nlohmann::json&);    \
    template void save_checkpoint(const std::filesystem::path&, const Generator<S>&, std::int64_t,          \
                                  std::uint64_t);                                                           \
    template LoadedCheckpoint<S> load_checkpoint<S>(const std::filesystem::path&);

CRN_INSTANTIATE_MODELS(float)
CRN_INSTANTIATE_MODELS(double)

}  // namespace crn
