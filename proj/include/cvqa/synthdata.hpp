#pragma once

// Synthetic fundus-like scenes with exact lesion geometry, and the
// grading / question rules evaluated on that geometry.
//
// Grading: 0 when no exudates exist, 2 when any exudate center lies within
// the macular circle (centered on the fovea, radius = one disc diameter),
// otherwise 1. A blob is inside a region iff its center is.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cvqa::synth {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

double distance(Point a, Point b);

struct Exudate {
  Point center;
  double radius = 1.0;
  double intensity = 1.0;
  bool operator==(const Exudate&) const = default;
};

struct Scene {
  int scene_id = 0;
  int width = 0;
  int height = 0;
  Point fovea_center;
  double disc_diameter = 0.0;
  double macula_radius = 0.0;  // always equal to disc_diameter
  Point disc_center;
  std::vector<Exudate> exudates;
  std::uint64_t background_seed = 0;

  bool operator==(const Scene&) const = default;
};

// Throws IntegrityError when a Scene invariant is broken.
void validate_scene(const Scene& scene);

enum class RegionKind { whole, macula, custom };

struct Region {
  Point center;
  double radius = 0.0;
  RegionKind kind = RegionKind::whole;

  static Region whole(int width, int height);
  static Region macula(const Scene& scene);
  static Region circle(Point center, double radius);

  // Pixel or point membership; whole-kind contains everything.
  bool contains(Point p) const;
  bool operator==(const Region&) const = default;
};

enum class QType { main, sub_whole, sub_macula, sub_region, ind_region };

std::string_view to_string(QType q);
QType parse_qtype(std::string_view s);
std::string_view to_string(RegionKind k);
RegionKind parse_region_kind(std::string_view s);

// Answer indices into AnswerVocab::answers.
inline constexpr int kNo = 0;
inline constexpr int kYes = 1;
inline constexpr int kGrade0 = 2;
inline constexpr int kAnswerCount = 5;
inline constexpr int grade_answer(int grade) { return kGrade0 + grade; }

struct QARecord {
  int qa_id = 0;
  int scene_id = 0;
  std::vector<std::string> question_tokens;
  QType qtype = QType::main;
  Region region;
  int answer = 0;
  std::optional<int> related_main;

  bool operator==(const QARecord&) const = default;
};

struct AnswerVocab {
  std::array<std::string, kAnswerCount> answers{"no", "yes", "grade0", "grade1", "grade2"};
  // Inverse training frequency, normalized to mean 1.
  std::array<double, kAnswerCount> class_weights{1.0, 1.0, 1.0, 1.0, 1.0};

  static AnswerVocab from_training(std::span<const QARecord> train);
};

struct TokenVocab {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  std::vector<std::string> tokens{"<pad>", "<unk>"};

  // Vocabulary of every question template this generator emits.
  static TokenVocab standard();
  int id(std::string_view token) const;
  // Pads or truncates to `max_len`, unknown tokens map to kUnk.
  std::vector<int> encode(std::span<const std::string> words, std::size_t max_len) const;
  std::size_t size() const { return tokens.size(); }
};

std::vector<std::string> question_tokens(QType q);

struct GenConfig {
  int width = 64;
  int height = 64;
  int channels = 1;
  // Target frequency of grades 0 / 1 / 2.
  std::array<double, 3> grade_weights{1.0, 1.0, 1.0};
  int min_exudates = 1;
  int max_exudates = 6;  // 0 forces lesion-free scenes
  int min_blob_radius = 1;
  int max_blob_radius = 3;
  // Disc diameter as a fraction of the shorter image side.
  double min_disc_fraction = 0.14;
  double max_disc_fraction = 0.18;

  // Throws ConfigError.
  void validate() const;
};

// Rendering levels.
inline constexpr double kExudateIntensityFloor = 0.7;
inline constexpr double kBackgroundCeiling = 0.4;
inline constexpr double kDiscIntensity = 0.6;

struct QAConfig {
  // Expected counts per scene; the fractional part is realized stochastically.
  // Defaults give 4.4% main / 21.4% sub / 74.2% ind.
  double sub_region_per_scene = 2.864;
  double ind_region_per_scene = 16.864;
  // Region radii as multiples of the macular radius.
  double min_region_radius = 0.5;
  double max_region_radius = 1.5;
};

Scene generate_scene(const GenConfig& config, int scene_id, std::mt19937_64& rng);
int grade_scene(const Scene& scene);
bool region_contains_exudate(const Scene& scene, const Region& region);

struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> pixels;  // (channel, y, x), row-major

  double& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

Image rasterize(const Scene& scene);

// Records for one scene. `next_qa_id` is advanced by the number emitted.
std::vector<QARecord> build_qa(const Scene& scene, const QAConfig& config, std::mt19937_64& rng, int& next_qa_id);

// Answer a record should carry, recomputed from scene geometry.
int expected_answer(const Scene& scene, const QARecord& record);

}  // namespace cvqa::synth
