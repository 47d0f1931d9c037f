#include "glesam/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace glesam {

ad::Value ParamStore::add(const std::string& name, Tensor init, bool trainable) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore::add: duplicate name " + name);
    ad::Value v = ad::leaf(std::move(init), trainable);
    v->requires_grad = trainable;  // independent of any NoGradGuard at registration time
    params_[name] = v;
    trainable_[name] = trainable;
    return v;
}

ad::Value ParamStore::replace(const std::string& name, Tensor value, bool trainable) {
    params_.erase(name);
    trainable_.erase(name);
    return add(name, std::move(value), trainable);
}

void ParamStore::remove(const std::string& name) {
    if (!params_.erase(name)) throw std::invalid_argument("ParamStore::remove: no such name " + name);
    trainable_.erase(name);
}

ad::Value ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("ParamStore::get: no such name " + name);
    return it->second;
}

Tensor& ParamStore::value(const std::string& name) { return get(name)->val; }
const Tensor& ParamStore::value(const std::string& name) const { return get(name)->val; }

void ParamStore::set_trainable(const std::string& name, bool trainable) {
    auto it = params_.find(name);
    if (it == params_.end())
        throw std::invalid_argument("ParamStore::set_trainable: no such name " + name);
    it->second->requires_grad = trainable;
    trainable_[name] = trainable;
}

void ParamStore::set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& [name, v] : params_)
        if (name.rfind(prefix, 0) == 0) {
            v->requires_grad = trainable;
            trainable_[name] = trainable;
        }
}

bool ParamStore::trainable(const std::string& name) const {
    auto it = trainable_.find(name);
    if (it == trainable_.end())
        throw std::invalid_argument("ParamStore::trainable: no such name " + name);
    return it->second;
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, v] : params_)
        if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
}

std::vector<std::string> ParamStore::trainable_names(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, v] : params_)
        if (name.rfind(prefix, 0) == 0 && trainable_.at(name)) out.push_back(name);
    return out;
}

int64_t ParamStore::numel(const std::string& prefix, bool trainable_only) const {
    int64_t n = 0;
    for (const auto& [name, v] : params_) {
        if (name.rfind(prefix, 0) != 0) continue;
        if (trainable_only && !trainable_.at(name)) continue;
        n += v->val.numel();
    }
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [name, v] : params_) v->grad = Tensor();
}

void AdamW::step(ParamStore& store) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, double(t_));
    double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (const std::string& name : store.trainable_names()) {
        ad::Value p = store.get(name);
        if (!p->has_grad()) continue;
        Tensor& m = m_.try_emplace(name, Tensor::zeros(p->val.shape)).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(p->val.shape)).first->second;
        if (!m.same_shape(p->val)) m = Tensor::zeros(p->val.shape);  // param was replaced
        if (!v.same_shape(p->val)) v = Tensor::zeros(p->val.shape);
        for (size_t i = 0; i < p->val.data.size(); ++i) {
            double g = p->grad.data[i];
            m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
            v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
            double mh = m.data[i] / bc1, vh = v.data[i] / bc2;
            p->val.data[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * p->val.data[i]);
        }
    }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
    double sq = 0.0;
    std::vector<ad::Value> with_grad;
    for (const std::string& name : store.trainable_names()) {
        ad::Value p = store.get(name);
        if (!p->has_grad()) continue;
        with_grad.push_back(p);
        for (double g : p->grad.data) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (ad::Value& p : with_grad) p->grad *= s;
    }
    return norm;
}

// ---- checkpoint I/O ----

namespace {
constexpr char kMagic[4] = {'G', 'L', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::istream& is, const std::string& path) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error("checkpoint: truncated archive " + path);
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store, const CheckpointMeta& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    std::vector<std::string> names = store.names();
    write_u32(os, uint32_t(names.size()));
    for (const std::string& name : names) {
        const Tensor& t = store.value(name);
        write_u32(os, uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        write_u32(os, uint32_t(t.ndim()));
        for (int d : t.shape) write_u32(os, uint32_t(d));
        std::vector<float> f(t.data.begin(), t.data.end());
        os.write(reinterpret_cast<const char*>(f.data()), std::streamsize(f.size() * 4));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
    os.close();

    nlohmann::json j;
    j["format_version"] = kVersion;
    j["config_hash"] = meta.config_hash;
    j["stage"] = meta.stage;
    j["iteration"] = meta.iteration;
    j["extra"] = meta.extra;
    nlohmann::json tr = nlohmann::json::object();
    for (const std::string& name : names) tr[name] = store.trainable(name);
    j["trainable"] = tr;
    std::ofstream js(path + ".json");
    if (!js) throw std::runtime_error("checkpoint: cannot open sidecar for " + path);
    js << j.dump(2) << "\n";
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store,
                               const std::string& prefix) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t version = read_u32(is, path);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version in " + path);
    uint32_t count = read_u32(is, path);
    std::vector<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t nlen = read_u32(is, path);
        std::string name(nlen, '\0');
        if (!is.read(name.data(), nlen)) throw std::runtime_error("checkpoint: truncated " + path);
        uint32_t ndim = read_u32(is, path);
        std::vector<int> shape(ndim);
        int64_t n = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape[d] = int(read_u32(is, path));
            n *= shape[d];
        }
        std::vector<float> f(size_t(n), 0.0f);
        if (!is.read(reinterpret_cast<char*>(f.data()), std::streamsize(f.size() * 4)))
            throw std::runtime_error("checkpoint: truncated payload in " + path);
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        if (!store.has(name))
            throw std::runtime_error("checkpoint: archive entry '" + name +
                                     "' has no registered parameter (" + path + ")");
        Tensor& dst = store.value(name);
        if (dst.shape != shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': registered " +
                                     dst.shape_str() + " vs archived " +
                                     Tensor(shape).shape_str() + " (" + path + ")");
        for (size_t k = 0; k < f.size(); ++k) dst.data[k] = double(f[k]);
        seen.push_back(name);
    }
    // every registered parameter under `prefix` must have been filled
    for (const std::string& name : store.names(prefix)) {
        if (std::find(seen.begin(), seen.end(), name) == seen.end())
            throw std::runtime_error("checkpoint: registered parameter '" + name +
                                     "' missing from archive " + path);
    }
    return read_checkpoint_meta(path);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("checkpoint: missing sidecar " + path + ".json");
    nlohmann::json j = nlohmann::json::parse(js);
    CheckpointMeta meta;
    meta.config_hash = j.value("config_hash", "");
    meta.stage = j.value("stage", "");
    meta.iteration = j.value("iteration", int64_t(0));
    if (j.contains("extra"))
        for (auto& [k, v] : j["extra"].items()) meta.extra[k] = v.get<std::string>();
    return meta;
}

}  // namespace glesam
