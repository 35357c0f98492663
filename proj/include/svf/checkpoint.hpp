#pragma once

// On-disk checkpoints: a directory holding `manifest.txt` plus one binary tensor
// file per parameter. The manifest is `key = value` lines; anything that varies
// between identical runs lives under a trailing `[volatile]` header.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "svf/model.hpp"

namespace svf {

using ManifestEntries = std::vector<std::pair<std::string, std::string>>;

struct Manifest {
    std::map<std::string, std::string> stable;
    std::map<std::string, std::string> volatile_entries;

    /// Throws std::runtime_error naming the key when it is absent from the stable section.
    const std::string& at(const std::string& key) const;
};

/// Writes `entries` in order, then `[volatile]` with written_at (UTC, ISO 8601).
void write_manifest(const std::filesystem::path& file, const ManifestEntries& entries);
Manifest read_manifest(const std::filesystem::path& file);

/// A pretrained (undecomposed) backbone. `extra` is appended to the manifest.
void save_backbone(const std::filesystem::path& dir, const Backbone& backbone, const ManifestEntries& extra = {});
Backbone load_backbone(const std::filesystem::path& dir);

/// Backbone, head, strategy and, for decomposed convs, the singular values at decomposition.
void save_model(const std::filesystem::path& dir, const FssModel& model, const ManifestEntries& extra = {});
/// Rebuilds the model with the stored strategy applied, then restores every tensor by name.
FssModel load_model(const std::filesystem::path& dir);

std::string channels_string(const ChannelPlan& c);
ChannelPlan parse_channels(const std::string& s);

}  // namespace svf
