#include "svf/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

namespace svf {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

bool inside(ShapeFamily s, double u, double v, double r) {
    switch (s) {
        case ShapeFamily::Disk: return u * u + v * v <= r * r;
        case ShapeFamily::Square: return std::max(std::abs(u), std::abs(v)) <= 0.8 * r;
        case ShapeFamily::Triangle: return v >= -0.5 * r && v <= r - std::sqrt(3.0) * std::abs(u);
        case ShapeFamily::Ring: {
            const double d2 = u * u + v * v;
            return d2 <= r * r && d2 >= 0.3025 * r * r;
        }
        case ShapeFamily::Cross:
            return (std::abs(u) <= r && std::abs(v) <= 0.3 * r) || (std::abs(v) <= r && std::abs(u) <= 0.3 * r);
        case ShapeFamily::Bar: return std::abs(u) <= r && std::abs(v) <= 0.35 * r;
    }
    return false;
}

double area_factor(ShapeFamily s) {
    switch (s) {
        case ShapeFamily::Disk: return std::numbers::pi;
        case ShapeFamily::Square: return 2.56;
        case ShapeFamily::Triangle: return 0.75 * std::sqrt(3.0);
        case ShapeFamily::Ring: return std::numbers::pi * (1.0 - 0.3025);
        case ShapeFamily::Cross: return 2.04;
        case ShapeFamily::Bar: return 1.4;
    }
    return 0.0;
}

struct Canvas {
    std::size_t size;
    Tensor4& image;
    Tensor4* mask;
};

std::array<double, 3> random_colour(std::mt19937_64& rng) {
    // HSV with high saturation and value
    const double h = uniform(rng, 0.0, 6.0);
    const double s = uniform(rng, 0.6, 1.0);
    const double v = uniform(rng, 0.7, 1.0);
    const double f = h - std::floor(h);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (static_cast<int>(h) % 6) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

void draw_object(const ClassSpec& cls, Canvas& c, std::mt19937_64& rng) {
    const double r = uniform(rng, cls.radius_min, cls.radius_max);
    const double n = static_cast<double>(c.size);
    const double cx = uniform(rng, r + 1.0, std::max(r + 1.0, n - r - 1.0));
    const double cy = uniform(rng, r + 1.0, std::max(r + 1.0, n - r - 1.0));
    const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const auto colour = random_colour(rng);
    const double phase = uniform(rng, 0.0, 6.0);
    std::uniform_real_distribution<double> tint(0.55, 1.0);

    for (std::size_t y = 0; y < c.size; ++y)
        for (std::size_t x = 0; x < c.size; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const double u = dx * ca + dy * sa;
            const double v = -dx * sa + dy * ca;
            if (!inside(cls.shape, u, v, r)) continue;
            double k = 1.0;
            switch (cls.texture) {
                case TextureFamily::Solid: break;
                case TextureFamily::Stripes:
                    k = static_cast<long>(std::floor((u + phase) / 3.0)) % 2 == 0 ? 1.0 : 0.35;
                    break;
                case TextureFamily::Checker:
                    k = (static_cast<long>(std::floor((x + phase) / 3.0)) + static_cast<long>(std::floor((y + phase) / 3.0))) % 2 == 0
                            ? 1.0
                            : 0.35;
                    break;
                case TextureFamily::NoiseTinted: k = tint(rng); break;
            }
            for (std::size_t ch = 0; ch < 3; ++ch) c.image.at(0, ch, y, x) = colour[ch] * k;
            if (c.mask) c.mask->at(0, 0, y, x) = 1.0;
        }
}

}  // namespace

std::pair<double, double> ClassSpec::area_bounds() const {
    const double a = area_factor(shape);
    return {std::max(1.0, a * radius_min * radius_min - 10.0 * radius_min), a * radius_max * radius_max + 10.0 * radius_max};
}

std::string to_string(ShapeFamily s) {
    static const char* names[] = {"disk", "square", "triangle", "ring", "cross", "bar"};
    return names[static_cast<int>(s)];
}

std::string to_string(TextureFamily t) {
    static const char* names[] = {"solid", "stripes", "checker", "noise-tinted"};
    return names[static_cast<int>(t)];
}

std::vector<ClassSpec> make_classes(std::size_t num_classes, std::size_t image_size) {
    if (num_classes == 0 || num_classes > kNumShapes * kNumTextures)
        throw std::invalid_argument(fmt::format("make_classes: {} classes requested, 1..{} available", num_classes,
                                                kNumShapes * kNumTextures));
    if (image_size < 16) throw std::invalid_argument("make_classes: image size below 16");
    const double scale = static_cast<double>(image_size) / 64.0;
    std::vector<ClassSpec> out;
    for (std::size_t c = 0; c < num_classes; ++c) {
        ClassSpec s;
        s.id = static_cast<int>(c);
        s.shape = static_cast<ShapeFamily>(c % kNumShapes);
        s.texture = static_cast<TextureFamily>((c / kNumShapes + c) % kNumTextures);
        s.radius_min = 9.0 * scale;
        s.radius_max = 16.0 * scale;
        out.push_back(s);
    }
    return out;
}

void SplitPlan::validate() const {
    if (folds < 2) throw std::invalid_argument("split plan: need at least 2 folds");
    if (fold >= folds) throw std::invalid_argument(fmt::format("split plan: fold {} outside 0..{}", fold, folds - 1));
    if (num_classes < folds)
        throw std::invalid_argument(fmt::format("split plan: {} classes cannot fill {} folds", num_classes, folds));
}

std::vector<int> SplitPlan::test_classes() const {
    validate();
    const std::size_t base = num_classes / folds, rem = num_classes % folds;
    const std::size_t start = fold * base + std::min(fold, rem);
    const std::size_t count = base + (fold < rem ? 1 : 0);
    std::vector<int> out;
    for (std::size_t c = start; c < start + count; ++c) out.push_back(static_cast<int>(c));
    return out;
}

std::vector<int> SplitPlan::train_classes() const {
    const auto test = test_classes();
    std::vector<int> out;
    for (std::size_t c = 0; c < num_classes; ++c)
        if (std::find(test.begin(), test.end(), static_cast<int>(c)) == test.end()) out.push_back(static_cast<int>(c));
    return out;
}

Scene render_scene(const ClassSpec& cls, std::span<const ClassSpec> distractor_pool, const SceneConfig& cfg,
                   std::mt19937_64& rng) {
    const std::size_t n = cfg.image_size;
    Scene s{Tensor4({1, 3, n, n}), Tensor4({1, 1, n, n})};

    std::array<double, 3> base{};
    for (double& b : base) b = uniform(rng, 0.2, 0.8);
    const double gx = uniform(rng, -0.25, 0.25), gy = uniform(rng, -0.25, 0.25);
    const double wave = uniform(rng, 0.0, 0.08);
    const double freq = uniform(rng, 0.15, 0.6), theta = uniform(rng, 0.0, std::numbers::pi);
    std::normal_distribution<double> grain(0.0, 0.03);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double fx = static_cast<double>(x) / n - 0.5, fy = static_cast<double>(y) / n - 0.5;
            const double w = wave * std::sin(freq * (std::cos(theta) * x + std::sin(theta) * y));
            for (std::size_t c = 0; c < 3; ++c) s.image.at(0, c, y, x) = base[c] + gx * fx + gy * fy + w + grain(rng);
        }

    std::vector<const ClassSpec*> pool;
    for (const ClassSpec& d : distractor_pool)
        if (d.id != cls.id) pool.push_back(&d);
    Canvas back{n, s.image, nullptr};
    if (!pool.empty() && cfg.max_distractors > 0) {
        const auto count = std::uniform_int_distribution<std::size_t>(0, cfg.max_distractors)(rng);
        for (std::size_t i = 0; i < count; ++i) {
            const auto pick = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
            draw_object(*pool[pick], back, rng);
        }
    }
    Canvas front{n, s.image, &s.mask};
    draw_object(cls, front, rng);

    for (double& v : s.image.values()) v = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
    return s;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    return splitmix64(splitmix64(splitmix64(seed) ^ (stream * 0xD1B54A32D192ED03ULL)) ^ index);
}

Episode sample_episode(const SplitPlan& plan, Split split, const EpisodeConfig& cfg, std::uint64_t episode_seed) {
    if (cfg.shots == 0) throw std::invalid_argument("sample_episode: k must be at least 1");
    const auto classes = make_classes(plan.num_classes, cfg.scene.image_size);
    const auto ids = split == Split::Train ? plan.train_classes() : plan.test_classes();
    if (ids.empty()) throw std::invalid_argument("sample_episode: empty split");
    std::vector<ClassSpec> base;
    for (int id : plan.train_classes()) base.push_back(classes[id]);

    std::mt19937_64 pick(derive_seed(episode_seed, 0, 0));
    Episode e;
    e.class_id = ids[std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(pick)];
    const ClassSpec& cls = classes[e.class_id];
    std::mt19937_64 qrng(derive_seed(episode_seed, 1, 0));
    e.query = render_scene(cls, base, cfg.scene, qrng);
    for (std::size_t i = 0; i < cfg.shots; ++i) {
        if (cfg.duplicate_supports && i > 0) {
            e.supports.push_back(e.supports.front());
            continue;
        }
        std::mt19937_64 srng(derive_seed(episode_seed, 2, i));
        e.supports.push_back(render_scene(cls, base, cfg.scene, srng));
    }
    return e;
}

std::vector<Episode> sample_episodes(const SplitPlan& plan, Split split, const EpisodeConfig& cfg, std::uint64_t seed,
                                     std::uint64_t stream, std::size_t first, std::size_t count) {
    std::vector<Episode> out(count);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(count); ++i)
        out[i] = sample_episode(plan, split, cfg, derive_seed(seed, stream, first + i));
    return out;
}

void dump_episodes(const std::filesystem::path& dir, std::span<const Episode> episodes) {
    std::filesystem::create_directories(dir);
    std::ofstream index(dir / "index.jsonl", std::ios::trunc);
    if (!index) throw std::runtime_error("cannot write " + (dir / "index.jsonl").string());
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        const Episode& e = episodes[i];
        auto save = [&](const std::string& stem, const Scene& s) {
            nlohmann::json j;
            j["image"] = stem + "_image.svft";
            j["mask"] = stem + "_mask.svft";
            save_tensor(dir / j["image"].get<std::string>(), s.image);
            save_tensor(dir / j["mask"].get<std::string>(), s.mask);
            return j;
        };
        nlohmann::json line;
        line["episode"] = i;
        line["class"] = e.class_id;
        line["k"] = e.shots();
        line["supports"] = nlohmann::json::array();
        for (std::size_t k = 0; k < e.shots(); ++k)
            line["supports"].push_back(save(fmt::format("ep{:05}_support{}", i, k), e.supports[k]));
        line["query"] = save(fmt::format("ep{:05}_query", i), e.query);
        index << line.dump() << '\n';
    }
}

}  // namespace svf
