#include "dts/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace dts {

// ---------------------------------------------------------------------------
// ParamStore

Tensor& ParamStore::add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, std::move(value), {}, {}});
    Entry& e = entries_.back();
    e.adam_m.assign(e.value.size(), 0.0);
    e.adam_v.assign(e.value.size(), 0.0);
    return e.value;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) != 0; }

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return entries_[it->second].value;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown parameter " + name);
    return entries_[it->second].value;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
}

ParamStore ParamStore::subset(const std::string& prefix) const {
    ParamStore out;
    for (const auto& e : entries_)
        if (e.name.rfind(prefix, 0) == 0) out.add(e.name, e.value);
    return out;
}

bool ParamStore::adam_step(const GradientMap& grads, double lr, double beta1, double beta2, double eps) {
    for (const auto& e : entries_) {
        auto it = grads.find(e.name);
        if (it == grads.end()) continue;
        for (double g : it->second)
            if (!std::isfinite(g)) return false;
    }
    ++adam_step_count_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_step_count_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_step_count_));
    static const std::vector<double> kNoGrad;
    for (auto& e : entries_) {
        auto it = grads.find(e.name);
        const std::vector<double>& g = (it == grads.end()) ? kNoGrad : it->second;
        auto& data = e.value.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            double gi = g.empty() ? 0.0 : g[i];
            e.adam_m[i] = beta1 * e.adam_m[i] + (1.0 - beta1) * gi;
            e.adam_v[i] = beta2 * e.adam_v[i] + (1.0 - beta2) * gi * gi;
            double mhat = e.adam_m[i] / bc1;
            double vhat = e.adam_v[i] / bc2;
            data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
    return true;
}

void ema_update(ParamStore& target, const ParamStore& online, double alpha) {
    std::set<std::string> tn, on;
    for (const auto& e : target.entries()) tn.insert(e.name);
    for (const auto& e : online.entries()) on.insert(e.name);
    if (tn != on) throw std::invalid_argument("ema_update: parameter name sets differ");
    for (const auto& name : tn) {
        auto& tv = target.get(name).mutable_data();
        const auto& ov = online.get(name).data();
        for (std::size_t i = 0; i < tv.size(); ++i)
            tv[i] = alpha * tv[i] + (1.0 - alpha) * ov[i];
    }
}

// ---------------------------------------------------------------------------
// Checkpoint io: little-endian binary with named fp64 arrays.

namespace {

constexpr char kMagic[8] = {'D', 'T', 'S', 'P', 'S', 'T', 'R', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated stream");
    return v;
}

void write_doubles(std::ostream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& in, std::vector<double>& v, std::size_t n) {
    v.resize(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated stream");
}

} // namespace

void ParamStore::save(std::ostream& out) const {
    out.write(kMagic, sizeof kMagic);
    write_pod<std::int64_t>(out, adam_step_count_);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        const Shape& s = e.value.shape();
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
        for (std::size_t d : s) write_pod<std::uint64_t>(out, d);
        write_doubles(out, e.value.data());
        write_doubles(out, e.adam_m);
        write_doubles(out, e.adam_v);
    }
}

ParamStore ParamStore::load(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    ParamStore store;
    store.adam_step_count_ = read_pod<std::int64_t>(in);
    auto count = read_pod<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        auto name_len = read_pod<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        auto ndim = read_pod<std::uint32_t>(in);
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
        std::size_t n = numel(shape);
        std::vector<double> data;
        read_doubles(in, data, n);
        Tensor& t = store.add(name, Tensor(std::move(shape), std::move(data)));
        (void)t;
        Entry& e = store.entries_.back();
        read_doubles(in, e.adam_m, n);
        read_doubles(in, e.adam_v, n);
    }
    return store;
}

void ParamStore::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    save(out);
}

ParamStore ParamStore::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    return load(in);
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::string prefix, std::vector<std::size_t> widths, bool output_tanh)
    : prefix_(std::move(prefix)), widths_(std::move(widths)), output_tanh_(output_tanh) {
    if (widths_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
    for (std::size_t w : widths_)
        if (w == 0) throw std::invalid_argument("Mlp: zero layer width");
}

void Mlp::init(ParamStore& store, Rng& rng) const {
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        std::size_t fan_in = widths_[l], fan_out = widths_[l + 1];
        double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
        std::vector<double> w(fan_out * fan_in);
        for (double& v : w) v = rng.uniform(-bound, bound);
        store.add(prefix_ + ".w" + std::to_string(l), Tensor({fan_out, fan_in}, std::move(w)));
        store.add(prefix_ + ".b" + std::to_string(l), Tensor::zeros({fan_out}));
    }
}

Tensor Mlp::forward(Tape& tape, const ParamStore& store, const Tensor& x,
                    const std::string& param_prefix) const {
    if (x.shape().size() != 1 || x.shape()[0] != widths_.front())
        throw std::invalid_argument("Mlp " + prefix_ + ": input shape " + shape_str(x.shape()) +
                                    " does not match width " + std::to_string(widths_.front()));
    Tensor h = x;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        std::string wname = prefix_ + ".w" + std::to_string(l);
        std::string bname = prefix_ + ".b" + std::to_string(l);
        Tensor w = tape.param(param_prefix + wname, store.get(wname));
        Tensor b = tape.param(param_prefix + bname, store.get(bname));
        h = tape.add(tape.matmul(w, h), b);
        bool last = (l + 2 == widths_.size());
        if (!last)
            h = tape.relu(h);
        else if (output_tanh_)
            h = tape.tanh(h);
    }
    return h;
}

} // namespace dts
