#pragma once

// Synthetic few-shot segmentation tasks: textured shapes on textured
// backgrounds, split into base and novel classes by fold.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "svf/tensor.hpp"

namespace svf {

enum class ShapeFamily { Disk, Square, Triangle, Ring, Cross, Bar };
enum class TextureFamily { Solid, Stripes, Checker, NoiseTinted };

inline constexpr std::size_t kNumShapes = 6;
inline constexpr std::size_t kNumTextures = 4;

struct ClassSpec {
    int id = 0;
    ShapeFamily shape = ShapeFamily::Disk;
    TextureFamily texture = TextureFamily::Solid;
    double radius_min = 9.0;  // pixels
    double radius_max = 16.0;

    /// Loose pixel-count bounds for one unclipped object of this class.
    std::pair<double, double> area_bounds() const;
};

std::string to_string(ShapeFamily s);
std::string to_string(TextureFamily t);

/// Class c has shape c % 6 and texture (c / 6 + c) % 4, so every (shape, texture) pair is distinct and
/// contiguous id blocks mix textures. Radii scale with the image size (9..16 px at 64).
std::vector<ClassSpec> make_classes(std::size_t num_classes, std::size_t image_size);

struct SplitPlan {
    std::size_t num_classes = 20;
    std::size_t folds = 4;
    std::size_t fold = 0;

    void validate() const;
    /// Novel classes of the fold: a contiguous block, sizes differing by at most one across folds.
    std::vector<int> test_classes() const;
    std::vector<int> train_classes() const;
};

enum class Split { Train, Test };

/// One (N = 1) image with values in [0, 1] rounded to single precision, and its binary mask.
struct Scene {
    Tensor4 image;  // (1, 3, H, W)
    Tensor4 mask;   // (1, 1, H, W), 0 or 1
};

struct SceneConfig {
    std::size_t image_size = 64;
    std::size_t max_distractors = 2;
};

/// Renders one object of `cls` over a random background with 0..max_distractors objects drawn
/// from `distractor_pool` behind it. The mask marks the foreground object only.
Scene render_scene(const ClassSpec& cls, std::span<const ClassSpec> distractor_pool, const SceneConfig& cfg,
                   std::mt19937_64& rng);

struct Episode {
    int class_id = 0;
    std::vector<Scene> supports;
    Scene query;

    std::size_t shots() const { return supports.size(); }
};

struct EpisodeConfig {
    SceneConfig scene;
    std::size_t shots = 1;
    bool duplicate_supports = false;  // every support is a copy of the first
};

/// Stable 64-bit seed for item `index` of stream `stream` under a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

/// Episode from its own seed. The class, the query and support i come from independent
/// sub-seeds, so k = 1 and k = 5 episodes of one seed share the query and first support.
Episode sample_episode(const SplitPlan& plan, Split split, const EpisodeConfig& cfg, std::uint64_t episode_seed);

/// Episodes [first, first + count) of a stream.
std::vector<Episode> sample_episodes(const SplitPlan& plan, Split split, const EpisodeConfig& cfg, std::uint64_t seed,
                                     std::uint64_t stream, std::size_t first, std::size_t count);

/// Writes each episode's tensors in the binary tensor format plus an `index.jsonl`.
void dump_episodes(const std::filesystem::path& dir, std::span<const Episode> episodes);

}  // namespace svf
