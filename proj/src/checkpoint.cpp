#include "svf/checkpoint.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/core.h>

namespace svf {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "svf-checkpoint/1";
constexpr const char* kVolatileHeader = "[volatile]";

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

fs::path tensor_path(const fs::path& dir, const std::string& name) { return dir / (name + ".svft"); }

void load_into(const fs::path& dir, ad::Param& p) {
    const fs::path file = tensor_path(dir, p.name);
    if (!fs::exists(file)) throw std::runtime_error(fmt::format("checkpoint: missing tensor file {}", file.string()));
    Tensor4 t = load_tensor(file);
    if (t.dims() != p.value.dims())
        throw ShapeError(fmt::format("checkpoint: '{}' stored as {}, model expects {}", p.name, dims_string(t.dims()),
                                     dims_string(p.value.dims())));
    p.value = std::move(t);
}

std::string initial_scale_name(const BackboneConv& c) { return c.name + ".initial_scale"; }

void save_conv(const fs::path& dir, const BackboneConv& c) {
    save_tensor(tensor_path(dir, c.weight.name), c.weight.value);
    for (const ad::Param* p : {&c.bn.gamma, &c.bn.beta, &c.bn.mean, &c.bn.var}) save_tensor(tensor_path(dir, p->name), p->value);
    if (!c.svf) return;
    const DecomposedConv& d = *c.svf;
    for (const ad::Param* p : {&d.conv_v, &d.scale, &d.conv_u}) save_tensor(tensor_path(dir, p->name), p->value);
    if (d.s_prime) save_tensor(tensor_path(dir, d.s_prime->name), d.s_prime->value);
    save_tensor(tensor_path(dir, initial_scale_name(c)), Tensor4({d.initial_scale.size(), 1, 1, 1}, d.initial_scale));
}

void load_conv(const fs::path& dir, BackboneConv& c) {
    load_into(dir, c.weight);
    for (ad::Param* p : {&c.bn.gamma, &c.bn.beta, &c.bn.mean, &c.bn.var}) load_into(dir, *p);
    if (!c.svf) return;
    DecomposedConv& d = *c.svf;
    for (ad::Param* p : {&d.conv_v, &d.scale, &d.conv_u}) load_into(dir, *p);
    if (d.s_prime) load_into(dir, *d.s_prime);
    ad::Param init(initial_scale_name(c), Tensor4({d.rank(), 1, 1, 1}));
    load_into(dir, init);
    d.initial_scale.assign(init.value.values().begin(), init.value.values().end());
}

void prepare_dir(const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".svft" || entry.path().filename() == "manifest.txt") fs::remove(entry.path());
}

void check_format(const Manifest& m, const fs::path& dir, const char* kind) {
    if (m.at("format") != kFormat)
        throw std::runtime_error(fmt::format("checkpoint {}: unsupported format '{}'", dir.string(), m.at("format")));
    if (m.at("kind") != kind)
        throw std::runtime_error(fmt::format("checkpoint {}: holds a {}, expected a {}", dir.string(), m.at("kind"), kind));
}

bool parse_bool(const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw std::runtime_error("checkpoint: bad boolean '" + s + "'");
}

}  // namespace

const std::string& Manifest::at(const std::string& key) const {
    const auto it = stable.find(key);
    if (it == stable.end()) throw std::runtime_error("manifest: missing key '" + key + "'");
    return it->second;
}

void write_manifest(const fs::path& file, const ManifestEntries& entries) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    for (const auto& [k, v] : entries) out << k << " = " << v << '\n';
    out << '\n' << kVolatileHeader << '\n' << "written_at = " << utc_now() << '\n';
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

Manifest read_manifest(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read " + file.string());
    Manifest m;
    auto* section = &m.stable;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) continue;
        if (line == kVolatileHeader) {
            section = &m.volatile_entries;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(fmt::format("{}:{}: expected 'key = value'", file.string(), lineno));
        (*section)[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return m;
}

std::string channels_string(const ChannelPlan& c) { return fmt::format("{},{},{},{}", c[0], c[1], c[2], c[3]); }

ChannelPlan parse_channels(const std::string& s) {
    ChannelPlan out{};
    std::stringstream ss(s);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i == out.size()) throw std::invalid_argument("channels: expected four values, got '" + s + "'");
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(trim(item), &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != trim(item).size() || v == 0)
            throw std::invalid_argument("channels: bad value '" + item + "'");
        out[i++] = v;
    }
    if (i != out.size()) throw std::invalid_argument("channels: expected four values, got '" + s + "'");
    return out;
}

void save_backbone(const fs::path& dir, const Backbone& backbone, const ManifestEntries& extra) {
    for (const auto& c : backbone.convs())
        if (c.svf) throw std::logic_error("save_backbone: backbone is decomposed; save the model instead");
    prepare_dir(dir);
    for (const auto& c : backbone.convs()) save_conv(dir, c);
    ManifestEntries entries{{"format", kFormat}, {"kind", "backbone"}, {"channels", channels_string(backbone.channels())}};
    entries.insert(entries.end(), extra.begin(), extra.end());
    write_manifest(dir / "manifest.txt", entries);
}

Backbone load_backbone(const fs::path& dir) {
    const Manifest m = read_manifest(dir / "manifest.txt");
    check_format(m, dir, "backbone");
    Backbone bb = Backbone::init(parse_channels(m.at("channels")), 0);
    for (auto& c : bb.convs()) load_conv(dir, c);
    return bb;
}

void save_model(const fs::path& dir, const FssModel& model, const ManifestEntries& extra) {
    prepare_dir(dir);
    for (const auto& c : model.backbone.convs()) save_conv(dir, c);
    for (const ad::Param* p : model.head.params()) save_tensor(tensor_path(dir, p->name), p->value);
    const StrategyConfig& s = model.strategy;
    ManifestEntries entries{{"format", kFormat},
                            {"kind", "model"},
                            {"channels", channels_string(model.backbone.channels())},
                            {"head_width", std::to_string(model.head.classifier.value.dim(1))},
                            {"strategy.kind", to_string(s.kind)},
                            {"strategy.stages", stages_string(s.stages)},
                            {"strategy.kernels", to_string(s.kernels)},
                            {"strategy.subspaces", s.subspaces.label()},
                            {"strategy.variant", to_string(s.variant)},
                            {"strategy.bn_trainable", s.bn_trainable ? "true" : "false"},
                            {"strategy.label", s.label()}};
    entries.insert(entries.end(), extra.begin(), extra.end());
    write_manifest(dir / "manifest.txt", entries);
}

FssModel load_model(const fs::path& dir) {
    const Manifest m = read_manifest(dir / "manifest.txt");
    check_format(m, dir, "model");
    StrategyConfig s;
    s.kind = parse_strategy_kind(m.at("strategy.kind"));
    s.stages = parse_stages(m.at("strategy.stages"));
    s.kernels = parse_kernel_select(m.at("strategy.kernels"));
    s.subspaces = parse_subspaces(m.at("strategy.subspaces"));
    s.variant = parse_variant(m.at("strategy.variant"));
    s.bn_trainable = parse_bool(m.at("strategy.bn_trainable"));

    const std::string& width = m.at("head_width");
    std::size_t used = 0;
    const unsigned long head_width = std::stoul(width, &used);
    if (used != width.size()) throw std::runtime_error("checkpoint: bad head_width '" + width + "'");

    FssModel model = build_fss_model(Backbone::init(parse_channels(m.at("channels")), 0), head_width, 0, s);
    for (auto& c : model.backbone.convs()) load_conv(dir, c);
    for (ad::Param* p : model.head.params()) load_into(dir, *p);
    return model;
}

}  // namespace svf
