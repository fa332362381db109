#include "medblip/data/synthetic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "medblip/ndiff/error.hpp"

namespace medblip::data {

namespace {

constexpr std::array<std::string_view, 3> kNames{"NC", "MCI", "DEM"};
constexpr std::array<std::string_view, 3> kAnswers{"non demented", "mild cognitive impairment", "dementia"};
constexpr std::array<double, 3> kRadiusScale{1.0, 1.5, 2.2};
constexpr float kVentricleIntensity = 0.05f;
constexpr std::size_t kBackgroundGrid = 4;

struct Range {
  int lo, hi;
};
constexpr std::array<Range, 3> kAge{{{55, 80}, {60, 85}, {65, 90}}};
constexpr std::array<Range, 3> kMmse{{{28, 30}, {24, 27}, {12, 23}}};
constexpr Range kAgeAny{55, 90};
constexpr Range kMmseAny{12, 30};
constexpr Range kEducation{8, 20};
constexpr std::array<std::string_view, 4> kCdr{"0", "0.5", "1", "2"};

std::size_t index_of(Label label) { return static_cast<std::size_t>(label); }

int draw(std::mt19937_64& rng, Range r) { return std::uniform_int_distribution<int>(r.lo, r.hi)(rng); }

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

std::string_view label_name(Label label) { return kNames.at(index_of(label)); }

Label parse_label(std::string_view name) {
  for (Label l : kLabels)
    if (label_name(l) == name) return l;
  throw Error("unknown class label '" + std::string(name) + "' (expected NC, MCI or DEM)");
}

std::string_view canonical_answer(Label label) { return kAnswers.at(index_of(label)); }

Vocabulary::Vocabulary() {
  auto add = [this](std::string_view w) {
    if (ids_.count(std::string(w))) return;
    ids_.emplace(std::string(w), static_cast<int>(words_.size()));
    words_.emplace_back(w);
  };
  for (std::string_view w : {"<pad>", "<bos>", "<eos>", "question:", "answer:"}) add(w);
  const std::string grammar =
      "subject is a year old male female with years of education . mmse score and cdr " + std::string(kQuestion) +
      " non demented mild cognitive impairment dementia";
  std::istringstream in(grammar);
  for (std::string w; in >> w;) add(w);
  for (int n = 0; n <= 90; ++n) add(std::to_string(n));
  add("0.5");
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(std::string_view word) const {
  const auto it = ids_.find(std::string(word));
  if (it == ids_.end()) throw Error("word not in vocabulary: '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw Error("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::istringstream in(lowercase(text));
  std::vector<int> ids;
  std::vector<std::string> unknown;
  for (std::string w; in >> w;) {
    const auto it = ids_.find(w);
    if (it == ids_.end()) {
      unknown.push_back(w);
    } else {
      ids.push_back(it->second);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "out-of-grammar words:";
    for (const auto& w : unknown) msg += " '" + w + "'";
    throw Error(msg);
  }
  return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

TextTokens build_texts(const SampleRecord& record, const Vocabulary& vocab) {
  return {vocab.tokenize(record.description), vocab.tokenize(record.question), vocab.tokenize(record.answer)};
}

std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base_seed), static_cast<std::uint32_t>(base_seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

GeneratedSample generate_sample(Label label, std::uint64_t seed, const GeneratorOptions& options) {
  const std::size_t dim = options.volume_dim;
  if (dim == 0) throw Error("generate_sample: volume_dim must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Every draw happens in the same order for every class.
  volume::Volume coarse({kBackgroundGrid, kBackgroundGrid, kBackgroundGrid});
  for (float& v : coarse.voxels) v = static_cast<float>(0.4 + 0.4 * unit(rng));
  const double jitter = 1.0 + 0.2 * (unit(rng) - 0.5);
  std::array<double, 3> axis{};
  for (double& a : axis) a = 1.0 + 0.2 * (unit(rng) - 0.5);

  GeneratedSample out;
  out.volume = volume::prepare_volume(coarse, static_cast<long>(dim));
  const double r0 = static_cast<double>(dim) / 10.0;
  const double radius = r0 * kRadiusScale[index_of(label)] * jitter;
  const double c = (static_cast<double>(dim) - 1.0) / 2.0;
  for (std::size_t z = 0; z < dim; ++z)
    for (std::size_t y = 0; y < dim; ++y)
      for (std::size_t x = 0; x < dim; ++x) {
        const double dz = (static_cast<double>(z) - c) / (radius * axis[0]);
        const double dy = (static_cast<double>(y) - c) / (radius * axis[1]);
        const double dx = (static_cast<double>(x) - c) / (radius * axis[2]);
        if (dz * dz + dy * dy + dx * dx <= 1.0) out.volume.at(z, y, x) = kVentricleIntensity;
      }

  const std::size_t k = index_of(label);
  const bool any = options.ambiguous_text;
  const int age = draw(rng, any ? kAgeAny : kAge[k]);
  const bool female = unit(rng) < 0.5;
  const int education = draw(rng, kEducation);
  const int mmse = draw(rng, any ? kMmseAny : kMmse[k]);
  const double cdr_draw = unit(rng);
  std::string_view cdr;
  if (any) {
    cdr = kCdr[std::min<std::size_t>(3, static_cast<std::size_t>(cdr_draw * 4.0))];
  } else {
    cdr = label == Label::NC ? kCdr[0] : label == Label::MCI ? kCdr[1] : kCdr[cdr_draw < 0.5 ? 2 : 3];
  }

  std::ostringstream desc;
  desc << "subject is a " << age << " year old " << (female ? "female" : "male") << " with " << education
       << " years of education . mmse score is " << mmse << " and cdr is " << cdr << " .";
  out.record.label = label;
  out.record.description = desc.str();
  out.record.question = std::string(kQuestion);
  out.record.answer = std::string(canonical_answer(label));
  out.record.seed = seed;
  return out;
}

double central_radius(std::size_t volume_dim) { return 2.42 * static_cast<double>(volume_dim) / 10.0; }

double mean_central_intensity(const volume::Volume& v) {
  const std::size_t dim = v.dims[0];
  const double c = (static_cast<double>(dim) - 1.0) / 2.0, r = central_radius(dim);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t z = 0; z < v.dims[0]; ++z)
    for (std::size_t y = 0; y < v.dims[1]; ++y)
      for (std::size_t x = 0; x < v.dims[2]; ++x) {
        const double dz = static_cast<double>(z) - c, dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
        if (dz * dz + dy * dy + dx * dx <= r * r) {
          total += v.at(z, y, x);
          ++count;
        }
      }
  if (count == 0) throw Error("mean_central_intensity: empty central region");
  return total / static_cast<double>(count);
}

std::map<Label, std::size_t> Manifest::class_counts() const {
  std::map<Label, std::size_t> counts;
  for (const auto& r : records) ++counts[r.label];
  return counts;
}

const SampleRecord& Manifest::find(std::string_view id) const {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw Error("sample '" + std::string(id) + "' not in manifest '" + name + "'");
}

std::filesystem::path resolve_volume(const std::filesystem::path& manifest_path, const SampleRecord& record) {
  const std::filesystem::path p(record.volume_path);
  return p.is_absolute() ? p : manifest_path.parent_path() / p;
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  auto check = [](const std::string& field, const std::string& what) {
    if (field.find_first_of("\t\n\r") != std::string::npos) throw Error("manifest " + what + " contains a tab or newline");
  };
  check(m.name, "name");
  check(m.split, "split");
  std::ostringstream out;
  out << "#manifest\t" << m.name << '\t' << m.split << '\t' << m.volume_dim << '\n';
  for (const auto& r : m.records) {
    for (const std::string* f : {&r.id, &r.volume_path, &r.description, &r.question, &r.answer}) check(*f, "field of " + r.id);
    out << r.id << '\t' << r.volume_path << '\t' << label_name(r.label) << '\t' << r.description << '\t'
        << r.question << '\t' << r.answer << '\t' << r.seed << '\n';
  }
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw Error("cannot write manifest " + path.string());
  file << out.str();
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
    fields.push_back(line.substr(start, tab - start));
  fields.push_back(line.substr(start));
  return fields;
}

std::uint64_t parse_u64(const std::string& s, const std::string& where) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw FormatError(where + ": expected an unsigned integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw FormatError(where + ": integer out of range '" + s + "'");
  }
}

}  // namespace

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return "manifest " + path.string() + " line " + std::to_string(line_no); };
  if (!std::getline(in, line)) throw FormatError("manifest " + path.string() + " is empty");
  ++line_no;
  const auto header = split_tabs(line);
  if (header.size() != 4 || header[0] != "#manifest") throw FormatError(where() + ": bad header");
  m.name = header[1];
  m.split = header[2];
  m.volume_dim = parse_u64(header[3], where());
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 7) {
      throw FormatError(where() + " (record " + std::to_string(m.records.size()) + "): expected 7 fields, got " +
                        std::to_string(f.size()));
    }
    SampleRecord r;
    r.id = f[0];
    r.volume_path = f[1];
    try {
      r.label = parse_label(f[2]);
    } catch (const Error& e) {
      throw FormatError(where() + ": " + e.what());
    }
    r.description = f[3];
    r.question = f[4];
    r.answer = f[5];
    r.seed = parse_u64(f[6], where());
    const auto vol = resolve_volume(path, r);
    if (!std::filesystem::exists(vol)) throw Error("sample '" + r.id + "': volume file missing: " + vol.string());
    try {
      volume::read_volume_dims(vol);
    } catch (const Error& e) {
      throw Error("sample '" + r.id + "': " + e.what());
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

Manifest generate_dataset(const DatasetRequest& request, const std::filesystem::path& out_dir) {
  if (request.classes.empty()) throw Error("generate_dataset: no classes requested");
  std::filesystem::create_directories(out_dir / "volumes");
  Manifest m;
  m.name = request.name;
  m.split = request.split;
  m.volume_dim = request.generator.volume_dim;
  const std::size_t total = request.per_class * request.classes.size();
  for (std::size_t i = 0; i < total; ++i) {
    const Label label = request.classes[i % request.classes.size()];
    GeneratedSample s = generate_sample(label, sample_seed(request.seed, i), request.generator);
    std::ostringstream id;
    id << request.split << '-' << std::setw(5) << std::setfill('0') << i;
    s.record.id = id.str();
    s.record.volume_path = "volumes/" + s.record.id + ".vol";
    volume::write_volume(s.volume, out_dir / s.record.volume_path);
    m.records.push_back(std::move(s.record));
  }
  write_manifest(m, out_dir / "manifest.tsv");
  return m;
}

}  // namespace medblip::data
