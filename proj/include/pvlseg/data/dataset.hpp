#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pvlseg/data/image.hpp"

namespace pvlseg {

struct Sample {
  std::string id;
  std::string split;
  std::string style;
  std::string text;
  Image<double> image;  // [0, 1]
  Mask mask;
};

struct PromptEntry {
  std::string id, split, style, text;
};

inline std::vector<PromptEntry> read_prompts(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "prompts.tsv";
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "id\tsplit\tstyle\ttext")
    throw InputError(path.string() + ": expected header 'id<TAB>split<TAB>style<TAB>text'");
  std::vector<PromptEntry> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    PromptEntry e;
    std::istringstream ss(line);
    if (!std::getline(ss, e.id, '\t') || !std::getline(ss, e.split, '\t') || !std::getline(ss, e.style, '\t') ||
        !std::getline(ss, e.text))
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected four tab-separated columns");
    rows.push_back(std::move(e));
  }
  return rows;
}

inline std::set<std::string> available_splits(const std::string& dir) {
  std::set<std::string> s;
  for (const auto& r : read_prompts(dir)) s.insert(r.split);
  return s;
}

// Samples of one split with the requested caption style. Images are cached
// per id so several styles share pixels.
inline std::vector<Sample> load_split(const std::string& dir, const std::string& split,
                                      const std::string& style = "original") {
  namespace fs = std::filesystem;
  std::vector<Sample> out;
  for (const auto& r : read_prompts(dir)) {
    if (r.split != split || r.style != style) continue;
    Sample s;
    s.id = r.id;
    s.split = r.split;
    s.style = r.style;
    s.text = r.text;
    s.image = from_bytes(read_pgm((fs::path(dir) / "images" / (r.id + ".pgm")).string()));
    s.mask = read_mask((fs::path(dir) / "masks" / (r.id + ".pgm")).string());
    if (!s.mask.same_shape(s.image)) throw InputError("sample " + r.id + ": image and mask sizes differ");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pvlseg
