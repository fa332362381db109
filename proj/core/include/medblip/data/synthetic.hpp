#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "medblip/data/special_tokens.hpp"
#include "medblip/volume/volume.hpp"

namespace medblip::data {

enum class Label { NC = 0, MCI = 1, DEM = 2 };
inline constexpr std::array<Label, 3> kLabels{Label::NC, Label::MCI, Label::DEM};

std::string_view label_name(Label label);  // "NC", "MCI", "DEM"
Label parse_label(std::string_view name);
std::string_view canonical_answer(Label label);

inline constexpr std::string_view kQuestion = "what will this subject be diagnosed with ?";

// Closed word-level vocabulary over the generator grammar. Ids 0-4 are the
// special tokens; everything else follows in a fixed order.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  std::size_t size() const { return words_.size(); }
  bool contains(std::string_view word) const { return ids_.count(std::string(word)) != 0; }
  int id(std::string_view word) const;
  const std::string& word(int id) const;

  // Lowercased, whitespace-split; throws Error listing unknown words.
  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(const std::vector<int>& ids) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

struct SampleRecord {
  std::string id;
  std::string volume_path;  // relative to the manifest directory, or absolute
  Label label = Label::NC;
  std::string description;
  std::string question;
  std::string answer;
  std::uint64_t seed = 0;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct TextTokens {
  std::vector<int> description;
  std::vector<int> question;
  std::vector<int> answer;
};

TextTokens build_texts(const SampleRecord& record, const Vocabulary& vocab = Vocabulary::standard());

struct GeneratorOptions {
  std::size_t volume_dim = 32;
  // Draw every description field independently of the class.
  bool ambiguous_text = false;
};

struct GeneratedSample {
  SampleRecord record;
  volume::Volume volume;
};

// Pure function of (label, seed, options). record.volume_path and record.id
// are left for the caller.
GeneratedSample generate_sample(Label label, std::uint64_t seed, const GeneratorOptions& options = {});

// Seed for sample `index` of a dataset generated from `base_seed`.
std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t index);

// Radius of the sphere around the volume center used for central statistics.
double central_radius(std::size_t volume_dim);
double mean_central_intensity(const volume::Volume& v);

struct Manifest {
  std::string name;
  std::string split;
  std::size_t volume_dim = 0;
  std::vector<SampleRecord> records;

  std::map<Label, std::size_t> class_counts() const;
  const SampleRecord& find(std::string_view id) const;
  friend bool operator==(const Manifest&, const Manifest&) = default;
};

// Header "#manifest\t<name>\t<split>\t<dim>", then one tab-separated record per
// line: id, volume path, class, T, Q, A, seed.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
// Verifies that each referenced volume exists and parses.
Manifest read_manifest(const std::filesystem::path& path);
std::filesystem::path resolve_volume(const std::filesystem::path& manifest_path, const SampleRecord& record);

struct DatasetRequest {
  std::string name = "synthetic";
  std::string split = "train";
  std::size_t per_class = 200;
  std::vector<Label> classes{kLabels.begin(), kLabels.end()};
  std::uint64_t seed = 0;
  GeneratorOptions generator;
};

// Writes <out>/manifest.tsv and <out>/volumes/<id>.vol; samples interleave
// classes so every prefix of the manifest is close to balanced.
Manifest generate_dataset(const DatasetRequest& request, const std::filesystem::path& out_dir);

}  // namespace medblip::data
