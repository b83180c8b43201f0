#include "cvqa/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <png.h>

#include "cvqa/errors.hpp"

namespace cvqa::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json point_json(Point p) { return json::array({p.x, p.y}); }
Point point_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IntegrityError("missing dataset file " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw IntegrityError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IntegrityError("cannot write " + path.string());
  for (const json& r : rows) os << r.dump() << '\n';
}

}  // namespace

json to_json(const Scene& s) {
  json ex = json::array();
  for (const Exudate& e : s.exudates) {
    ex.push_back({{"center", point_json(e.center)}, {"radius", e.radius}, {"intensity", e.intensity}});
  }
  return {{"scene_id", s.scene_id},
          {"width", s.width},
          {"height", s.height},
          {"fovea_center", point_json(s.fovea_center)},
          {"disc_diameter", s.disc_diameter},
          {"macula_radius", s.macula_radius},
          {"disc_center", point_json(s.disc_center)},
          {"exudates", ex},
          {"background_seed", s.background_seed}};
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.scene_id = j.at("scene_id").get<int>();
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.fovea_center = point_from(j.at("fovea_center"));
  s.disc_diameter = j.at("disc_diameter").get<double>();
  s.macula_radius = j.at("macula_radius").get<double>();
  s.disc_center = point_from(j.at("disc_center"));
  for (const json& e : j.at("exudates")) {
    s.exudates.push_back({point_from(e.at("center")), e.at("radius").get<double>(), e.at("intensity").get<double>()});
  }
  s.background_seed = j.at("background_seed").get<std::uint64_t>();
  return s;
}

json to_json(const QARecord& r) {
  return {{"qa_id", r.qa_id},
          {"scene_id", r.scene_id},
          {"question_tokens", r.question_tokens},
          {"qtype", to_string(r.qtype)},
          {"region", {{"center", point_json(r.region.center)}, {"radius", r.region.radius}, {"kind", to_string(r.region.kind)}}},
          {"answer", r.answer},
          {"related_main", r.related_main ? json(*r.related_main) : json(nullptr)}};
}

QARecord record_from_json(const json& j) {
  QARecord r;
  r.qa_id = j.at("qa_id").get<int>();
  r.scene_id = j.at("scene_id").get<int>();
  r.question_tokens = j.at("question_tokens").get<std::vector<std::string>>();
  r.qtype = parse_qtype(j.at("qtype").get<std::string>());
  const json& reg = j.at("region");
  r.region = Region{point_from(reg.at("center")), reg.at("radius").get<double>(),
                    parse_region_kind(reg.at("kind").get<std::string>())};
  r.answer = j.at("answer").get<int>();
  if (const json& rm = j.at("related_main"); !rm.is_null()) r.related_main = rm.get<int>();
  return r;
}

std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

GenerateOptions split_scene_count(int total) {
  if (total < 3) throw ConfigError("need at least 3 scenes to fill train/val/test");
  GenerateOptions o;
  o.val_scenes = std::max(1, static_cast<int>(std::lround(total * 3.0 / 19.0)));
  o.test_scenes = std::max(1, static_cast<int>(std::lround(total * 4.0 / 19.0)));
  o.train_scenes = total - o.val_scenes - o.test_scenes;
  if (o.train_scenes < 1) throw ConfigError("scene count too small for a training split");
  return o;
}

GeneratedDataset generate_dataset(const GenerateOptions& options) {
  options.gen.validate();
  if (options.train_scenes < 1 || options.val_scenes < 0 || options.test_scenes < 0) {
    throw ConfigError("split sizes must be positive");
  }
  GeneratedDataset out;
  out.tokens = TokenVocab::standard();
  const std::pair<const char*, int> plan[] = {
      {"train", options.train_scenes}, {"val", options.val_scenes}, {"test", options.test_scenes}};
  int scene_id = 0;
  int qa_id = 0;
  for (const auto& [name, count] : plan) {
    auto& records = out.splits[name];
    for (int i = 0; i < count; ++i, ++scene_id) {
      std::mt19937_64 rng(options.seed + static_cast<std::uint64_t>(scene_id));
      Scene s = generate_scene(options.gen, scene_id, rng);
      auto qa = build_qa(s, options.qa, rng, qa_id);
      records.insert(records.end(), qa.begin(), qa.end());
      out.scenes.push_back(std::move(s));
    }
  }
  out.answers = AnswerVocab::from_training(out.splits["train"]);
  return out;
}

void write_dataset(const GeneratedDataset& data, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::vector<json> rows;
  for (const Scene& s : data.scenes) {
    rows.push_back(to_json(s));
    write_png(dir / "images" / (std::to_string(s.scene_id) + ".png"), rasterize(s));
  }
  write_jsonl(dir / "scenes.jsonl", rows);
  for (const auto& [name, records] : data.splits) {
    rows.clear();
    for (const QARecord& r : records) rows.push_back(to_json(r));
    write_jsonl(dir / ("qa_" + name + ".jsonl"), rows);
  }
  json vocab = {{"answers", data.answers.answers},
                {"class_weights", data.answers.class_weights},
                {"tokens", data.tokens.tokens},
                {"max_question_length", kMaxQuestionLength}};
  std::ofstream(dir / "vocab.json") << vocab.dump(2) << '\n';
}

Vocabulary load_vocab(const fs::path& dir) {
  std::ifstream is(dir / "vocab.json");
  if (!is) throw IntegrityError("missing " + (dir / "vocab.json").string());
  Vocabulary v;
  try {
    const json j = json::parse(is);
    const auto answers = j.at("answers").get<std::vector<std::string>>();
    const auto weights = j.at("class_weights").get<std::vector<double>>();
    if (answers.size() != kAnswerCount || weights.size() != kAnswerCount) {
      throw IntegrityError("vocab.json must list exactly 5 answers and weights");
    }
    std::copy(answers.begin(), answers.end(), v.answers.answers.begin());
    std::copy(weights.begin(), weights.end(), v.answers.class_weights.begin());
    v.tokens.tokens = j.at("tokens").get<std::vector<std::string>>();
    v.max_question_length = j.value("max_question_length", kMaxQuestionLength);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("vocab.json: ") + e.what());
  }
  if (v.tokens.tokens.size() < 2 || v.tokens.tokens[0] != "<pad>" || v.tokens.tokens[1] != "<unk>") {
    throw IntegrityError("vocab.json: token list must start with <pad>, <unk>");
  }
  return v;
}

std::string vocab_digest(const Vocabulary& vocab) {
  json j = {{"answers", vocab.answers.answers}, {"tokens", vocab.tokens.tokens}, {"max_len", vocab.max_question_length}};
  return fnv1a_hex(j.dump());
}

Split load_split(const fs::path& dir, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") throw UsageError("unknown split '" + split + "'");
  Split out;
  out.name = split;
  for (const json& j : read_jsonl(dir / ("qa_" + split + ".jsonl"))) {
    try {
      out.records.push_back(record_from_json(j));
    } catch (const json::exception& e) {
      throw IntegrityError("qa_" + split + ".jsonl: " + e.what());
    }
  }
  std::set<int> wanted;
  for (const QARecord& r : out.records) wanted.insert(r.scene_id);
  for (const json& j : read_jsonl(dir / "scenes.jsonl")) {
    const int id = j.at("scene_id").get<int>();
    if (wanted.contains(id)) out.scenes.emplace(id, scene_from_json(j));
  }
  for (int id : wanted) {
    if (!out.scenes.contains(id)) throw IntegrityError("scene " + std::to_string(id) + " missing from scenes.jsonl");
    out.images.emplace(id, read_png(dir / "images" / (std::to_string(id) + ".png")));
  }
  return out;
}

void verify_split(const Split& split) {
  std::unordered_map<int, const QARecord*> by_id;
  for (const QARecord& r : split.records) {
    if (!by_id.emplace(r.qa_id, &r).second) throw IntegrityError("duplicate qa_id " + std::to_string(r.qa_id));
  }
  for (const auto& [id, scene] : split.scenes) validate_scene(scene);

  for (const QARecord& r : split.records) {
    const auto fail = [&](const std::string& why) {
      throw IntegrityError("qa_id " + std::to_string(r.qa_id) + ": " + why);
    };
    const auto sit = split.scenes.find(r.scene_id);
    if (sit == split.scenes.end()) fail("unknown scene " + std::to_string(r.scene_id));
    const Scene& scene = sit->second;
    const auto iit = split.images.find(r.scene_id);
    if (iit == split.images.end() || iit->second.width != scene.width || iit->second.height != scene.height) {
      fail("image missing or of the wrong size");
    }
    if (r.answer < 0 || r.answer >= kAnswerCount) fail("answer index out of range");
    const bool is_main = r.qtype == QType::main;
    if (is_main && (r.region.kind != RegionKind::whole || r.answer < kGrade0)) fail("main question must be whole-image graded");
    if (!is_main && r.answer >= kGrade0) fail("sub/ind question must be yes/no");
    if (r.qtype == QType::sub_whole && r.region.kind != RegionKind::whole) fail("sub_whole must use the whole image");
    if (r.qtype == QType::sub_macula && !(r.region == Region::macula(scene))) fail("sub_macula region is not the macula");
    if ((r.qtype == QType::sub_region || r.qtype == QType::ind_region) && r.region.kind != RegionKind::custom) {
      fail("region question without a custom region");
    }
    const bool is_sub = r.qtype == QType::sub_whole || r.qtype == QType::sub_macula || r.qtype == QType::sub_region;
    if (is_sub != r.related_main.has_value()) fail("related_main must be present exactly for sub questions");
    if (r.related_main) {
      const auto m = by_id.find(*r.related_main);
      if (m == by_id.end() || m->second->qtype != QType::main) fail("related_main is not a main question");
      if (m->second->scene_id != r.scene_id) fail("related_main links a different scene");
    }
    if (expected_answer(scene, r) != r.answer) fail("stored answer disagrees with scene geometry");
  }
}

void write_png(const fs::path& path, const Image& image) {
  if (image.channels != 1) throw UsageError("write_png: only single-channel images are supported");
  std::vector<png_byte> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IntegrityError("cannot write " + path.string() + ": " + png.message);
  }
}

Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IntegrityError("cannot read " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw IntegrityError("cannot decode " + path.string() + ": " + png.message);
  }
  Image img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.channels = 1;
  img.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace cvqa::synth
