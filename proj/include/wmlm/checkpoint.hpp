#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlm/train_config.hpp"
#include "wmlm/transformer.hpp"

// Checkpoint container: magic "WMLM", little-endian u32 version, u64 metadata
// length, UTF-8 JSON metadata (configs plus a tensor directory of
// name/shape/offset), then raw little-endian float32 tensor data. Reload is
// bit-exact, so a reloaded model reproduces forward logits bitwise.

namespace wmlm {

template <class T>
struct AdamState {
    Parameters<T> m;
    Parameters<T> v;
};

struct Checkpoint {
    ModelConfig model;
    TrainConfig train;
    std::string tokenizer_hash;  // fnv1a-64 hex of the vocab file bytes
    std::int64_t step = 0;
    Parameters<float> params;
    std::optional<AdamState<float>> moments;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

namespace detail {

constexpr std::uint32_t checkpoint_version = 1;

inline void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline std::uint32_t get_u32le(const std::string& bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) |
            static_cast<std::uint8_t>(bytes[offset + static_cast<std::size_t>(i)]);
    }
    return v;
}

inline std::uint64_t get_u64le(const std::string& bytes, std::size_t offset) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) |
            static_cast<std::uint8_t>(bytes[offset + static_cast<std::size_t>(i)]);
    }
    return v;
}

inline void put_f32le(std::string& out, float f) {
    put_u32le(out, std::bit_cast<std::uint32_t>(f));
}

inline nlohmann::json model_to_json(const ModelConfig& config) {
    return nlohmann::json{{"n_layers", config.n_layers},
                          {"d_model", config.d_model},
                          {"n_heads", config.n_heads},
                          {"max_context", config.max_context},
                          {"vocab_size", config.vocab_size},
                          {"untied_head", config.untied_head}};
}

inline ModelConfig model_from_json(const nlohmann::json& j,
                                   const std::string& constraint_text) {
    ModelConfig config;
    config.n_layers = j.at("n_layers").get<int>();
    config.d_model = j.at("d_model").get<int>();
    config.n_heads = j.at("n_heads").get<int>();
    config.max_context = j.at("max_context").get<int>();
    config.vocab_size = j.at("vocab_size").get<int>();
    config.untied_head = j.at("untied_head").get<bool>();
    config.constraint = ConstraintSpec::parse(constraint_text);
    config.validate();
    return config;
}

inline nlohmann::json train_to_json(const TrainConfig& config) {
    return nlohmann::json{{"learning_rate", config.learning_rate},
                          {"weight_decay", config.weight_decay},
                          {"batch_size", config.batch_size},
                          {"grad_clip_max_norm", config.grad_clip_max_norm},
                          {"epochs", config.epochs},
                          {"seed", config.seed},
                          {"sequence_length", config.sequence_length},
                          {"adam_beta1", config.adam_beta1},
                          {"adam_beta2", config.adam_beta2},
                          {"adam_epsilon", config.adam_epsilon},
                          {"checkpoint_every_steps",
                           config.checkpoint_every_steps}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    TrainConfig config;
    config.learning_rate = j.at("learning_rate").get<double>();
    config.weight_decay = j.at("weight_decay").get<double>();
    config.batch_size = j.at("batch_size").get<int>();
    config.grad_clip_max_norm = j.at("grad_clip_max_norm").get<double>();
    config.epochs = j.at("epochs").get<int>();
    config.seed = j.at("seed").get<std::uint64_t>();
    config.sequence_length = j.at("sequence_length").get<int>();
    config.adam_beta1 = j.at("adam_beta1").get<double>();
    config.adam_beta2 = j.at("adam_beta2").get<double>();
    config.adam_epsilon = j.at("adam_epsilon").get<double>();
    config.checkpoint_every_steps = j.at("checkpoint_every_steps").get<int>();
    config.validate();
    return config;
}

}  // namespace detail

inline void Checkpoint::save(const std::string& path) const {
    using nlohmann::json;

    // Data section: parameters first, then optional Adam moments, in
    // traversal order.
    std::string data;
    json directory = json::array();
    auto emit = [&](const std::string& name, const TensorRef<const float>& ref) {
        json entry;
        entry["name"] = name;
        entry["dims"] = ref.dims;
        entry["offset"] = data.size();
        directory.push_back(entry);
        for (const float f : ref.data) detail::put_f32le(data, f);
    };
    for_each_tensor(model, params, [&](const TensorRef<const float>& ref) {
        emit(ref.name, ref);
    });
    if (moments) {
        for_each_tensor(model, moments->m,
                        [&](const TensorRef<const float>& ref) {
                            emit("adam.m." + ref.name, ref);
                        });
        for_each_tensor(model, moments->v,
                        [&](const TensorRef<const float>& ref) {
                            emit("adam.v." + ref.name, ref);
                        });
    }

    json meta;
    meta["model"] = detail::model_to_json(model);
    meta["train"] = detail::train_to_json(train);
    meta["constraint"] = model.constraint.encode();
    meta["tokenizer_hash"] = tokenizer_hash;
    meta["step"] = step;
    meta["has_moments"] = moments.has_value();
    meta["tensors"] = directory;
    const std::string meta_text = meta.dump();

    std::string out;
    out += "WMLM";
    detail::put_u32le(out, detail::checkpoint_version);
    detail::put_u64le(out, meta_text.size());
    out += meta_text;
    out += data;

    std::ofstream file(path, std::ios::binary);
    if (!file) throw user_error("cannot write checkpoint: " + path);
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw user_error("failed writing checkpoint: " + path);
}

inline Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw user_error("cannot open checkpoint: " + path);
    const std::string bytes((std::istreambuf_iterator<char>(file)), {});

    if (bytes.size() < 16 || bytes.substr(0, 4) != "WMLM") {
        throw user_error("not a checkpoint file (bad magic): " + path);
    }
    const std::uint32_t version = detail::get_u32le(bytes, 4);
    if (version != detail::checkpoint_version) {
        throw user_error("unsupported checkpoint version " +
                         std::to_string(version) + " in " + path);
    }
    const std::uint64_t meta_len = detail::get_u64le(bytes, 8);
    if (16 + meta_len > bytes.size()) {
        throw user_error("truncated checkpoint metadata: " + path);
    }

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.substr(16, meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw user_error("bad checkpoint metadata in " + path + ": " + e.what());
    }

    Checkpoint checkpoint;
    try {
        checkpoint.model = detail::model_from_json(
            meta.at("model"), meta.at("constraint").get<std::string>());
        checkpoint.train = detail::train_from_json(meta.at("train"));
        checkpoint.tokenizer_hash =
            meta.at("tokenizer_hash").get<std::string>();
        checkpoint.step = meta.at("step").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw user_error("bad checkpoint metadata in " + path + ": " + e.what());
    }

    checkpoint.params = zero_parameters<float>(checkpoint.model);
    const bool has_moments = meta.at("has_moments").get<bool>();
    if (has_moments) {
        checkpoint.moments =
            AdamState<float>{zero_parameters<float>(checkpoint.model),
                             zero_parameters<float>(checkpoint.model)};
    }

    const std::size_t data_start = 16 + meta_len;
    auto read_into = [&](const nlohmann::json& entry, std::span<float> dest,
                         const std::vector<std::size_t>& dims) {
        const auto stored_dims =
            entry.at("dims").get<std::vector<std::size_t>>();
        if (stored_dims != dims) {
            throw user_error("tensor shape mismatch for '" +
                             entry.at("name").get<std::string>() + "' in " +
                             path);
        }
        const auto offset = entry.at("offset").get<std::size_t>();
        if (data_start + offset + 4 * dest.size() > bytes.size()) {
            throw user_error("truncated checkpoint tensor data: " + path);
        }
        for (std::size_t i = 0; i < dest.size(); ++i) {
            dest[i] = std::bit_cast<float>(
                detail::get_u32le(bytes, data_start + offset + 4 * i));
        }
    };

    // Index directory entries by name, then fill every expected tensor.
    std::unordered_map<std::string, const nlohmann::json*> index;
    for (const auto& entry : meta.at("tensors")) {
        index[entry.at("name").get<std::string>()] = &entry;
    }
    auto fill = [&](const std::string& name, const TensorRef<float>& ref) {
        const auto it = index.find(name);
        if (it == index.end()) {
            throw user_error("checkpoint missing tensor '" + name + "': " +
                             path);
        }
        read_into(*it->second, ref.data, ref.dims);
    };
    for_each_tensor(checkpoint.model, checkpoint.params,
                    [&](const TensorRef<float>& ref) { fill(ref.name, ref); });
    if (has_moments) {
        for_each_tensor(checkpoint.model, checkpoint.moments->m,
                        [&](const TensorRef<float>& ref) {
                            fill("adam.m." + ref.name, ref);
                        });
        for_each_tensor(checkpoint.model, checkpoint.moments->v,
                        [&](const TensorRef<float>& ref) {
                            fill("adam.v." + ref.name, ref);
                        });
    }
    return checkpoint;
}

}  // namespace wmlm
