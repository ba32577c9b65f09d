#include "sklp/corpus.hpp"

#include "sklp/errors.hpp"
#include "sklp/ingest.hpp"

#include <fstream>

namespace sklp {

void CorpusRecord::validate() const {
  if (segments.size() != static_cast<std::size_t>(kSegmentsPerText)) {
    throw DataError("pair " + std::to_string(pair_id) + " has " + std::to_string(segments.size()) +
                    " segments, expected 8");
  }
  if (tier != "L" && tier != "M" && tier != "S") throw DataError("pair " + std::to_string(pair_id) + " has tier " + tier);
  if (tier != "L" && !parent_id) throw DataError("pair " + std::to_string(pair_id) + " of tier " + tier + " lacks parent_id");
  if (planted) {
    for (int j : *planted) {
      if (j < 0 || j >= kSegmentsPerText) throw DataError("planted index out of range");
    }
  }
}

std::string CorpusRecord::text() const {
  std::string out;
  for (const std::string& s : segments) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

nlohmann::json to_json(const CorpusRecord& r) {
  nlohmann::json j{{"pair_id", r.pair_id},  {"image_path", r.image_path}, {"segments", r.segments},
                   {"tier", r.tier},        {"geo", r.geo}};
  j["parent_id"] = r.parent_id ? nlohmann::json(*r.parent_id) : nlohmann::json(nullptr);
  if (r.planted) j["planted"] = *r.planted;
  return j;
}

CorpusRecord record_from_json(const nlohmann::json& j) {
  CorpusRecord r;
  try {
    r.pair_id = j.at("pair_id").get<std::int64_t>();
    r.image_path = j.at("image_path").get<std::string>();
    r.segments = j.at("segments").get<std::vector<std::string>>();
    r.tier = j.value("tier", std::string("L"));
    if (j.contains("parent_id") && !j["parent_id"].is_null()) r.parent_id = j["parent_id"].get<std::string>();
    if (j.contains("geo")) r.geo = j["geo"];
    if (j.contains("planted")) r.planted = j["planted"].get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus record: ") + e.what());
  }
  r.validate();
  return r;
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& jsonl) {
  std::ifstream f(jsonl, std::ios::binary);
  if (!f) throw IoError("cannot open corpus " + jsonl.string());
  std::vector<CorpusRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_corpus(const std::filesystem::path& jsonl, const std::vector<CorpusRecord>& records) {
  std::ofstream f(jsonl, std::ios::binary);
  if (!f) throw IoError("cannot write corpus " + jsonl.string());
  for (const CorpusRecord& r : records) f << to_json(r).dump() << '\n';
}

EncodedText encode_segments(const model::Vocabulary& vocab, const std::vector<std::string>& segments,
                            int skip_segment) {
  EncodedText out;
  out.ids.push_back(model::Vocabulary::kCls);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const int begin = static_cast<int>(out.ids.size());
    if (static_cast<int>(s) != skip_segment) {
      for (int id : vocab.encode(segments[s])) out.ids.push_back(id);
    }
    out.spans.emplace_back(begin, static_cast<int>(out.ids.size()));
  }
  return out;
}

ad::Matrix load_image(const std::filesystem::path& path) {
  const ingest::ByteRaster r = ingest::read_pgm(path);
  ad::Matrix m(r.height, r.width);
  for (int row = 0; row < r.height; ++row) {
    for (int col = 0; col < r.width; ++col) m(row, col) = r.at(row, col) / 255.0;
  }
  return m;
}

}  // namespace sklp
