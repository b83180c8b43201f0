#include "cvqa/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cvqa/errors.hpp"

namespace cvqa::synth {

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// floor(expected) plus one more with probability frac(expected).
int stochastic_count(std::mt19937_64& rng, double expected) {
  const double base = std::floor(expected);
  const double frac = expected - base;
  return static_cast<int>(base) + (std::bernoulli_distribution(frac)(rng) ? 1 : 0);
}

}  // namespace

double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

void validate_scene(const Scene& s) {
  const auto fail = [&](const std::string& why) {
    throw IntegrityError("scene " + std::to_string(s.scene_id) + ": " + why);
  };
  if (s.width <= 0 || s.height <= 0) fail("non-positive image size");
  if (s.disc_diameter <= 0.0) fail("non-positive disc diameter");
  if (s.macula_radius != s.disc_diameter) fail("macula radius differs from disc diameter");
  const double r = s.macula_radius;
  if (s.fovea_center.x < r || s.fovea_center.y < r || s.fovea_center.x > s.width - 1 - r ||
      s.fovea_center.y > s.height - 1 - r) {
    fail("macular circle does not fit inside the image");
  }
  for (const Exudate& e : s.exudates) {
    if (e.center.x < 0 || e.center.y < 0 || e.center.x > s.width - 1 || e.center.y > s.height - 1) {
      fail("exudate center outside the image");
    }
    if (e.radius < 1.0) fail("exudate radius below one pixel");
    if (e.intensity < 0.0 || e.intensity > 1.0) fail("exudate intensity outside [0, 1]");
  }
}

Region Region::whole(int width, int height) {
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  return Region{{cx, cy}, std::hypot(cx, cy), RegionKind::whole};
}

Region Region::macula(const Scene& scene) { return Region{scene.fovea_center, scene.macula_radius, RegionKind::macula}; }

Region Region::circle(Point center, double radius) { return Region{center, radius, RegionKind::custom}; }

bool Region::contains(Point p) const {
  if (kind == RegionKind::whole) return true;
  const double dx = p.x - center.x, dy = p.y - center.y;
  return dx * dx + dy * dy <= radius * radius;
}

std::string_view to_string(QType q) {
  switch (q) {
    case QType::main: return "main";
    case QType::sub_whole: return "sub_whole";
    case QType::sub_macula: return "sub_macula";
    case QType::sub_region: return "sub_region";
    case QType::ind_region: return "ind_region";
  }
  return "?";
}

QType parse_qtype(std::string_view s) {
  for (QType q : {QType::main, QType::sub_whole, QType::sub_macula, QType::sub_region, QType::ind_region}) {
    if (to_string(q) == s) return q;
  }
  throw IntegrityError("unknown qtype '" + std::string(s) + "'");
}

std::string_view to_string(RegionKind k) {
  switch (k) {
    case RegionKind::whole: return "whole";
    case RegionKind::macula: return "macula";
    case RegionKind::custom: return "custom";
  }
  return "?";
}

RegionKind parse_region_kind(std::string_view s) {
  for (RegionKind k : {RegionKind::whole, RegionKind::macula, RegionKind::custom}) {
    if (to_string(k) == s) return k;
  }
  throw IntegrityError("unknown region kind '" + std::string(s) + "'");
}

AnswerVocab AnswerVocab::from_training(std::span<const QARecord> train) {
  std::array<double, kAnswerCount> counts{};
  for (const QARecord& r : train) {
    if (r.answer < 0 || r.answer >= kAnswerCount) throw UsageError("answer index out of range");
    counts[static_cast<std::size_t>(r.answer)] += 1.0;
  }
  AnswerVocab v;
  double total = 0.0;
  for (std::size_t a = 0; a < kAnswerCount; ++a) {
    v.class_weights[a] = 1.0 / std::max(counts[a], 1.0);
    total += v.class_weights[a];
  }
  for (double& w : v.class_weights) w *= kAnswerCount / total;
  return v;
}

std::vector<std::string> question_tokens(QType q) {
  switch (q) {
    case QType::main: return {"what", "is", "the", "dme", "risk", "grade"};
    case QType::sub_whole: return {"are", "there", "hard", "exudates", "in", "this", "image"};
    case QType::sub_macula: return {"are", "there", "hard", "exudates", "in", "the", "macula"};
    case QType::sub_region:
    case QType::ind_region: return {"are", "there", "hard", "exudates", "in", "this", "region"};
  }
  return {};
}

TokenVocab TokenVocab::standard() {
  std::set<std::string> words;
  for (QType q : {QType::main, QType::sub_whole, QType::sub_macula, QType::sub_region}) {
    for (auto& w : question_tokens(q)) words.insert(w);
  }
  TokenVocab v;
  v.tokens.insert(v.tokens.end(), words.begin(), words.end());
  return v;
}

int TokenVocab::id(std::string_view token) const {
  const auto it = std::find(tokens.begin(), tokens.end(), token);
  if (it == tokens.end() || it - tokens.begin() == kPad) return kUnk;
  return static_cast<int>(it - tokens.begin());
}

std::vector<int> TokenVocab::encode(std::span<const std::string> words, std::size_t max_len) const {
  std::vector<int> ids(max_len, kPad);
  for (std::size_t i = 0; i < std::min(max_len, words.size()); ++i) ids[i] = id(words[i]);
  return ids;
}

void GenConfig::validate() const {
  if (width <= 0 || height <= 0 || channels <= 0) throw ConfigError("image size and channels must be positive");
  if (std::min(width, height) < 16) throw ConfigError("images smaller than 16 pixels cannot hold the macula");
  if (std::any_of(grade_weights.begin(), grade_weights.end(), [](double w) { return w < 0.0 || !std::isfinite(w); }))
    throw ConfigError("grade weights must be finite and non-negative");
  if (std::accumulate(grade_weights.begin(), grade_weights.end(), 0.0) <= 0.0)
    throw ConfigError("grade distribution is empty");
  if (min_exudates < 0 || max_exudates < 0) throw ConfigError("exudate counts must be non-negative");
  if (max_exudates > 0 && min_exudates > max_exudates) throw ConfigError("min_exudates exceeds max_exudates");
  if (min_blob_radius < 1 || max_blob_radius < min_blob_radius) throw ConfigError("invalid blob radius range");
  if (!(min_disc_fraction > 0.0) || max_disc_fraction < min_disc_fraction || max_disc_fraction > 0.3)
    throw ConfigError("invalid disc fraction range");
  if (std::round(max_disc_fraction * std::min(width, height)) < 2.0) throw ConfigError("disc diameter rounds below 2");
}

Scene generate_scene(const GenConfig& config, int scene_id, std::mt19937_64& rng) {
  config.validate();
  Scene s;
  s.scene_id = scene_id;
  s.width = config.width;
  s.height = config.height;
  const int side = std::min(config.width, config.height);
  s.disc_diameter = std::max(2.0, std::round(uniform_real(rng, config.min_disc_fraction, config.max_disc_fraction) * side));
  s.macula_radius = s.disc_diameter;
  const double r = s.macula_radius;

  // Fovea near the image center, always at least r from each border.
  const auto fovea_coord = [&](int extent) {
    const int lo = static_cast<int>(std::ceil(std::max(r, 0.4 * extent)));
    const int hi = static_cast<int>(std::floor(std::min(extent - 1 - r, 0.6 * extent)));
    return static_cast<double>(uniform_int(rng, lo, std::max(lo, hi)));
  };
  s.fovea_center = {fovea_coord(config.width), fovea_coord(config.height)};

  // Optic disc 2.5 diameters to either side of the fovea, clipped to the image.
  const double disc_r = s.disc_diameter / 2.0;
  const double dir = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  const int dy = uniform_int(rng, -static_cast<int>(s.disc_diameter / 4), static_cast<int>(s.disc_diameter / 4));
  s.disc_center.x = std::clamp(std::round(s.fovea_center.x + dir * 2.5 * s.disc_diameter), std::ceil(disc_r),
                               std::floor(config.width - 1 - disc_r));
  s.disc_center.y = std::clamp(s.fovea_center.y + dy, std::ceil(disc_r), std::floor(config.height - 1 - disc_r));

  int grade = 0;
  if (config.max_exudates > 0) {
    std::discrete_distribution<int> pick(config.grade_weights.begin(), config.grade_weights.end());
    grade = pick(rng);
  }
  const int count = grade == 0 ? 0 : uniform_int(rng, std::max(1, config.min_exudates), config.max_exudates);

  for (int k = 0; k < count; ++k) {
    Exudate e;
    e.radius = uniform_int(rng, config.min_blob_radius, config.max_blob_radius);
    e.intensity = uniform_real(rng, kExudateIntensityFloor, 1.0);
    for (int attempt = 0;; ++attempt) {
      Point c;
      if (grade == 2 && k == 0) {
        // Seed lesion inside the macular circle.
        c = {std::round(s.fovea_center.x + uniform_real(rng, -r, r)),
             std::round(s.fovea_center.y + uniform_real(rng, -r, r))};
      } else {
        c = {static_cast<double>(uniform_int(rng, 1, config.width - 2)),
             static_cast<double>(uniform_int(rng, 1, config.height - 2))};
      }
      const double to_fovea = distance(c, s.fovea_center);
      const bool clear_of_disc = distance(c, s.disc_center) > disc_r + e.radius + 1.0;
      const bool placed = clear_of_disc && ((grade == 1 && to_fovea > r) || (grade == 2 && k == 0 && to_fovea <= r) ||
                                            (grade == 2 && k > 0));
      if (placed) {
        e.center = c;
        break;
      }
      if (attempt > 10000) throw ConfigError("could not place an exudate; image too small for the disc");
    }
    s.exudates.push_back(e);
  }
  s.background_seed = rng();
  return s;
}

int grade_scene(const Scene& scene) {
  if (scene.exudates.empty()) return 0;
  for (const Exudate& e : scene.exudates) {
    if (distance(e.center, scene.fovea_center) <= scene.macula_radius) return 2;
  }
  return 1;
}

bool region_contains_exudate(const Scene& scene, const Region& region) {
  return std::any_of(scene.exudates.begin(), scene.exudates.end(),
                     [&](const Exudate& e) { return region.contains(e.center); });
}

Image rasterize(const Scene& scene) {
  Image img;
  img.height = scene.height;
  img.width = scene.width;
  img.channels = 1;
  img.pixels.assign(static_cast<std::size_t>(scene.height) * scene.width, 0.0);

  std::mt19937_64 rng(scene.background_seed);
  std::normal_distribution<double> noise(0.0, 0.015);
  const double cx = (scene.width - 1) / 2.0, cy = (scene.height - 1) / 2.0;
  const double norm = cx * cx + cy * cy;
  const double fovea_sigma = scene.macula_radius / 2.5;
  const double disc_r = scene.disc_diameter / 2.0;

  for (int y = 0; y < scene.height; ++y)
    for (int x = 0; x < scene.width; ++x) {
      const Point p{static_cast<double>(x), static_cast<double>(y)};
      // Radial vignette, darkened toward the fovea.
      double v = 0.30 - 0.10 * ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / norm;
      const double df = distance(p, scene.fovea_center);
      v *= 1.0 - 0.6 * std::exp(-df * df / (2.0 * fovea_sigma * fovea_sigma));
      v = std::clamp(v + noise(rng), 0.0, kBackgroundCeiling);
      const double dd = distance(p, scene.disc_center);
      if (dd <= disc_r) v = kDiscIntensity - 0.04 + 0.04 * (1.0 - dd / disc_r);
      for (const Exudate& e : scene.exudates) {
        if (distance(p, e.center) <= e.radius) v = std::max(v, e.intensity);
      }
      img.at(0, y, x) = v;
    }
  return img;
}

int expected_answer(const Scene& scene, const QARecord& record) {
  switch (record.qtype) {
    case QType::main: return grade_answer(grade_scene(scene));
    case QType::sub_whole:
    case QType::sub_macula:
    case QType::sub_region:
    case QType::ind_region: return region_contains_exudate(scene, record.region) ? kYes : kNo;
  }
  return -1;
}

std::vector<QARecord> build_qa(const Scene& scene, const QAConfig& config, std::mt19937_64& rng, int& next_qa_id) {
  std::vector<QARecord> out;
  const auto emit = [&](QType q, Region region, std::optional<int> related) {
    QARecord r;
    r.qa_id = next_qa_id++;
    r.scene_id = scene.scene_id;
    r.question_tokens = question_tokens(q);
    r.qtype = q;
    r.region = region;
    r.related_main = related;
    r.answer = expected_answer(scene, r);
    out.push_back(std::move(r));
    return out.back().qa_id;
  };
  const auto radius = [&] {
    return std::round(scene.macula_radius * uniform_real(rng, config.min_region_radius, config.max_region_radius));
  };

  const int main_id = emit(QType::main, Region::whole(scene.width, scene.height), std::nullopt);
  emit(QType::sub_whole, Region::whole(scene.width, scene.height), main_id);
  emit(QType::sub_macula, Region::macula(scene), main_id);
  const int n_sub = stochastic_count(rng, config.sub_region_per_scene);
  for (int i = 0; i < n_sub; ++i) emit(QType::sub_region, Region::circle(scene.fovea_center, radius()), main_id);
  const int n_ind = stochastic_count(rng, config.ind_region_per_scene);
  for (int i = 0; i < n_ind; ++i) {
    const Point c{static_cast<double>(uniform_int(rng, 0, scene.width - 1)),
                  static_cast<double>(uniform_int(rng, 0, scene.height - 1))};
    emit(QType::ind_region, Region::circle(c, radius()), std::nullopt);
  }
  return out;
}

}  // namespace cvqa::synth
