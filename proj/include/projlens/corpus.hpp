#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "projlens/common.hpp"
#include "projlens/io.hpp"

namespace projlens {

enum class AnnotationSource { VG_LIKE, OPENIMAGES_LIKE, SYNTHETIC };

inline std::string to_string(AnnotationSource s) {
  switch (s) {
    case AnnotationSource::VG_LIKE: return "VG_LIKE";
    case AnnotationSource::OPENIMAGES_LIKE: return "OPENIMAGES_LIKE";
    case AnnotationSource::SYNTHETIC: return "SYNTHETIC";
  }
  throw_runtime("bad AnnotationSource");
}

inline AnnotationSource annotation_source_from_string(const std::string& s) {
  if (s == "VG_LIKE") return AnnotationSource::VG_LIKE;
  if (s == "OPENIMAGES_LIKE") return AnnotationSource::OPENIMAGES_LIKE;
  if (s == "SYNTHETIC") return AnnotationSource::SYNTHETIC;
  throw_parse("unknown annotation source: " + s);
}

struct ImageRecord {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::string uri;

  bool operator==(const ImageRecord&) const = default;
};

// Pixel-space box, (x1, y1, x2, y2) with x1 < x2 and y1 < y2.
using PixelBox = std::array<double, 4>;

struct RegionAnnotation {
  std::string annotation_id;
  std::string image_id;
  PixelBox box{};
  std::string raw_label;
  AnnotationSource source = AnnotationSource::VG_LIKE;

  bool operator==(const RegionAnnotation&) const = default;
};

struct Provenance {
  std::string source_desc;
  std::string ingested_at;  // informational only; excluded from the digest
  std::string digest;

  bool operator==(const Provenance&) const = default;
};

struct Corpus {
  std::vector<ImageRecord> images;
  std::vector<RegionAnnotation> annotations;
  Provenance provenance;

  bool operator==(const Corpus&) const = default;

  const ImageRecord& image(const std::string& image_id) const {
    for (const auto& im : images)
      if (im.image_id == image_id) return im;
    throw_runtime("unknown image_id: " + image_id);
  }
};

struct IngestStats {
  size_t annotations_seen = 0;
  size_t dropped_degenerate_box = 0;
  size_t dropped_missing_image = 0;
  size_t dropped_missing_label = 0;
  size_t clamped_coordinates = 0;
};

struct IngestResult {
  Corpus corpus;
  IngestStats stats;
};

namespace detail {

// Canonical record serialization; the corpus digest is over exactly these
// lines so persist/load round-trips are content-addressed.
inline std::string image_line(const ImageRecord& im) {
  json j;
  j["type"] = "image";
  j["id"] = im.image_id;
  j["width"] = im.width;
  j["height"] = im.height;
  j["uri"] = im.uri;
  return j.dump();
}

inline std::string annotation_line(const RegionAnnotation& a) {
  json j;
  j["type"] = "ann";
  j["id"] = a.annotation_id;
  j["image_id"] = a.image_id;
  j["box"] = a.box;
  j["label"] = a.raw_label;
  j["source"] = to_string(a.source);
  return j.dump();
}

inline std::string corpus_digest(const Corpus& c) {
  Fnv1a64 h;
  for (const auto& im : c.images) {
    h.update(image_line(im));
    h.update("\n");
  }
  for (const auto& a : c.annotations) {
    h.update(annotation_line(a));
    h.update("\n");
  }
  return h.hex();
}

inline void sort_records(Corpus& c) {
  std::sort(c.images.begin(), c.images.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });
  std::sort(c.annotations.begin(), c.annotations.end(),
            [](const RegionAnnotation& a, const RegionAnnotation& b) {
              return a.annotation_id < b.annotation_id;
            });
}

// Image metadata is accepted as CSV (image_id,width,height,uri), a JSON
// array, or JSON lines with fields image_id/width/height and uri or url.
inline std::map<std::string, ImageRecord> load_image_meta(const fs::path& path) {
  std::map<std::string, ImageRecord> out;
  auto add = [&](const json& j, const std::string& where) {
    ImageRecord im;
    if (j.contains("image_id"))
      im.image_id = j["image_id"].is_string() ? j["image_id"].get<std::string>()
                                              : std::to_string(j["image_id"].get<long long>());
    else if (j.contains("id"))
      im.image_id = j["id"].is_string() ? j["id"].get<std::string>()
                                        : std::to_string(j["id"].get<long long>());
    else
      throw_parse(where + ": image entry missing image_id");
    if (!j.contains("width") || !j.contains("height"))
      throw_parse(where + ": image " + im.image_id + " missing width/height");
    im.width = j["width"].get<int>();
    im.height = j["height"].get<int>();
    if (j.contains("uri")) im.uri = j["uri"].get<std::string>();
    else if (j.contains("url")) im.uri = j["url"].get<std::string>();
    if (im.width <= 0 || im.height <= 0)
      throw_parse(where + ": image " + im.image_id + " has non-positive dimensions");
    out[im.image_id] = im;
  };

  const std::string text = read_file(path);
  const std::string first = trim(text.substr(0, text.find('\n')));
  if (!first.empty() && first[0] == '[') {
    json arr = parse_json_strict(text, path.string());
    for (const auto& j : arr) add(j, path.string());
  } else if (!first.empty() && first[0] == '{') {
    const auto lines = read_lines(path);
    for (size_t i = 0; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      add(parse_json_strict(lines[i], path.string() + ":" + std::to_string(i + 1)),
          path.string() + ":" + std::to_string(i + 1));
    }
  } else {
    const auto lines = read_lines(path);
    if (lines.empty()) throw_parse(path.string() + ": empty image metadata");
    const auto header = csv_parse_line(lines[0]);
    auto col = [&](const std::string& name) -> int {
      for (size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
      return -1;
    };
    const int ci = col("image_id"), cw = col("width"), ch = col("height"), cu = col("uri");
    if (ci < 0 || cw < 0 || ch < 0)
      throw_parse(path.string() + ": image metadata CSV needs image_id,width,height columns");
    for (size_t i = 1; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      const auto f = csv_parse_line(lines[i]);
      json j;
      j["image_id"] = f[static_cast<size_t>(ci)];
      try {
        j["width"] = std::stoi(f[static_cast<size_t>(cw)]);
        j["height"] = std::stoi(f[static_cast<size_t>(ch)]);
      } catch (const std::exception&) {
        throw_parse(path.string() + ":" + std::to_string(i + 1) + ": bad width/height");
      }
      if (cu >= 0 && static_cast<size_t>(cu) < f.size()) j["uri"] = f[static_cast<size_t>(cu)];
      add(j, path.string() + ":" + std::to_string(i + 1));
    }
  }
  return out;
}

// Clamp to image bounds; true if anything moved.
inline bool clamp_box(PixelBox& b, int width, int height) {
  bool clamped = false;
  auto clamp1 = [&](double& v, double lo, double hi) {
    if (v < lo) { v = lo; clamped = true; }
    if (v > hi) { v = hi; clamped = true; }
  };
  clamp1(b[0], 0.0, width);
  clamp1(b[2], 0.0, width);
  clamp1(b[1], 0.0, height);
  clamp1(b[3], 0.0, height);
  return clamped;
}

}  // namespace detail

// VG-style object annotations: a JSON array (or JSON lines) of
// {image_id, objects: [{x, y, w, h, synsets: [...], names: [...]}]}.
// Objects with several synsets contribute one annotation per synset; the
// lemma dedup downstream resolves the multiplicity.
inline IngestResult ingest_vg_like(const fs::path& region_file, const fs::path& image_meta_file) {
  IngestResult res;
  auto meta = detail::load_image_meta(image_meta_file);

  const std::string text = read_file(region_file);
  json entries;
  const std::string first = trim(text.substr(0, text.find('\n')));
  if (!first.empty() && first[0] == '[') {
    entries = parse_json_strict(text, region_file.string());
  } else {
    entries = json::array();
    const auto lines = read_lines(region_file);
    for (size_t i = 0; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      entries.push_back(parse_json_strict(lines[i], region_file.string() + ":" + std::to_string(i + 1)));
    }
  }

  std::map<std::string, bool> used_images;
  for (const auto& entry : entries) {
    if (!entry.contains("image_id"))
      throw_parse(region_file.string() + ": entry missing image_id");
    const std::string image_id = entry["image_id"].is_string()
                                     ? entry["image_id"].get<std::string>()
                                     : std::to_string(entry["image_id"].get<long long>());
    const auto it = meta.find(image_id);
    const bool have_image = it != meta.end();
    if (!entry.contains("objects")) continue;
    size_t obj_idx = 0;
    for (const auto& obj : entry["objects"]) {
      ++obj_idx;
      res.stats.annotations_seen++;
      if (!have_image) {
        res.stats.dropped_missing_image++;
        continue;
      }
      if (!obj.contains("x") || !obj.contains("y") || !obj.contains("w") || !obj.contains("h"))
        throw_parse(region_file.string() + ": object on image " + image_id + " missing box");
      const double x = obj["x"].get<double>(), y = obj["y"].get<double>();
      const double w = obj["w"].get<double>(), h = obj["h"].get<double>();
      if (w <= 0 || h <= 0) {
        res.stats.dropped_degenerate_box++;
        continue;
      }
      std::vector<std::string> labels;
      if (obj.contains("synsets"))
        for (const auto& s : obj["synsets"]) labels.push_back(s.get<std::string>());
      if (labels.empty() && obj.contains("names"))
        for (const auto& s : obj["names"]) labels.push_back(s.get<std::string>());
      labels.erase(std::remove_if(labels.begin(), labels.end(),
                                  [](const std::string& s) { return trim(s).empty(); }),
                   labels.end());
      if (labels.empty()) {
        res.stats.dropped_missing_label++;
        continue;
      }
      PixelBox box{x, y, x + w, y + h};
      if (detail::clamp_box(box, it->second.width, it->second.height))
        res.stats.clamped_coordinates++;
      if (!(box[0] < box[2] && box[1] < box[3])) {
        res.stats.dropped_degenerate_box++;
        continue;
      }
      used_images[image_id] = true;
      for (size_t k = 0; k < labels.size(); ++k) {
        RegionAnnotation a;
        a.annotation_id = image_id + "#" + std::to_string(obj_idx);
        if (labels.size() > 1) a.annotation_id += "." + std::to_string(k);
        a.image_id = image_id;
        a.box = box;
        a.raw_label = trim(labels[k]);
        a.source = AnnotationSource::VG_LIKE;
        res.corpus.annotations.push_back(std::move(a));
      }
    }
  }

  for (const auto& [id, im] : meta)
    if (used_images.count(id)) res.corpus.images.push_back(im);
  detail::sort_records(res.corpus);
  res.corpus.provenance.source_desc = "vg_like:" + region_file.string();
  res.corpus.provenance.ingested_at = iso8601_now();
  res.corpus.provenance.digest = detail::corpus_digest(res.corpus);
  return res;
}

// OpenImages-style boxes: CSV with ImageID, LabelName and normalized
// XMin/XMax/YMin/YMax columns, plus a class-description CSV mapping label
// ids to display names. Out-of-range coordinates are clamped, not dropped;
// boundary rounding noise in the source would otherwise bias rare classes.
inline IngestResult ingest_openimages_like(const fs::path& box_csv, const fs::path& class_desc_csv,
                                           const fs::path& image_meta) {
  IngestResult res;
  auto meta = detail::load_image_meta(image_meta);

  std::map<std::string, std::string> display;
  {
    const auto lines = read_lines(class_desc_csv);
    size_t start = 0;
    if (!lines.empty()) {
      const auto f = csv_parse_line(lines[0]);
      if (!f.empty() && (f[0] == "LabelName" || f[0] == "label_name")) start = 1;
    }
    for (size_t i = start; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      const auto f = csv_parse_line(lines[i]);
      if (f.size() < 2)
        throw_parse(class_desc_csv.string() + ":" + std::to_string(i + 1) +
                    ": expected LabelName,DisplayName");
      display[f[0]] = f[1];
    }
  }

  const auto lines = read_lines(box_csv);
  if (lines.empty()) throw_parse(box_csv.string() + ": empty box CSV");
  const auto header = csv_parse_line(lines[0]);
  auto col = [&](const std::string& name) -> int {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int c_img = col("ImageID"), c_lab = col("LabelName");
  const int c_x0 = col("XMin"), c_x1 = col("XMax"), c_y0 = col("YMin"), c_y1 = col("YMax");
  if (c_img < 0 || c_lab < 0 || c_x0 < 0 || c_x1 < 0 || c_y0 < 0 || c_y1 < 0)
    throw_parse(box_csv.string() + ": missing ImageID/LabelName/XMin/XMax/YMin/YMax columns");

  std::map<std::string, bool> used_images;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const auto f = csv_parse_line(lines[i]);
    res.stats.annotations_seen++;
    const std::string image_id = f[static_cast<size_t>(c_img)];
    const auto it = meta.find(image_id);
    if (it == meta.end()) {
      res.stats.dropped_missing_image++;
      continue;
    }
    const auto dit = display.find(f[static_cast<size_t>(c_lab)]);
    if (dit == display.end()) {
      res.stats.dropped_missing_label++;
      continue;
    }
    double x0, x1, y0, y1;
    try {
      x0 = std::stod(f[static_cast<size_t>(c_x0)]);
      x1 = std::stod(f[static_cast<size_t>(c_x1)]);
      y0 = std::stod(f[static_cast<size_t>(c_y0)]);
      y1 = std::stod(f[static_cast<size_t>(c_y1)]);
    } catch (const std::exception&) {
      throw_parse(box_csv.string() + ":" + std::to_string(i + 1) + ": bad coordinate");
    }
    bool clamped = false;
    for (double* v : {&x0, &x1, &y0, &y1}) {
      if (*v < 0.0) { *v = 0.0; clamped = true; }
      if (*v > 1.0) { *v = 1.0; clamped = true; }
    }
    if (clamped) res.stats.clamped_coordinates++;
    PixelBox box{x0 * it->second.width, y0 * it->second.height, x1 * it->second.width,
                 y1 * it->second.height};
    if (!(box[0] < box[2] && box[1] < box[3])) {
      res.stats.dropped_degenerate_box++;
      continue;
    }
    RegionAnnotation a;
    a.annotation_id = image_id + "#" + std::to_string(i);
    a.image_id = image_id;
    a.box = box;
    a.raw_label = trim(dit->second);
    a.source = AnnotationSource::OPENIMAGES_LIKE;
    if (a.raw_label.empty()) {
      res.stats.dropped_missing_label++;
      continue;
    }
    used_images[image_id] = true;
    res.corpus.annotations.push_back(std::move(a));
  }

  for (const auto& [id, im] : meta)
    if (used_images.count(id)) res.corpus.images.push_back(im);
  detail::sort_records(res.corpus);
  res.corpus.provenance.source_desc = "openimages_like:" + box_csv.string();
  res.corpus.provenance.ingested_at = iso8601_now();
  res.corpus.provenance.digest = detail::corpus_digest(res.corpus);
  return res;
}

// Line-delimited records behind a manifest header carrying the content
// digest. load_corpus(persist_corpus(c)) == c field-for-field.
inline void persist_corpus(const Corpus& corpus, const fs::path& path) {
  for (const auto& a : corpus.annotations) {
    bool found = false;
    for (const auto& im : corpus.images)
      if (im.image_id == a.image_id) { found = true; break; }
    if (!found)
      throw_runtime("corpus invariant violated: annotation " + a.annotation_id +
                    " references missing image " + a.image_id);
  }
  const std::string digest = detail::corpus_digest(corpus);
  json manifest;
  manifest["type"] = "manifest";
  manifest["format"] = "projlens-corpus";
  manifest["version"] = 1;
  manifest["n_images"] = corpus.images.size();
  manifest["n_annotations"] = corpus.annotations.size();
  manifest["digest"] = digest;
  manifest["source_desc"] = corpus.provenance.source_desc;
  manifest["ingested_at"] = corpus.provenance.ingested_at;

  std::string out = manifest.dump();
  out += '\n';
  for (const auto& im : corpus.images) {
    out += detail::image_line(im);
    out += '\n';
  }
  for (const auto& a : corpus.annotations) {
    out += detail::annotation_line(a);
    out += '\n';
  }
  write_atomic(path, out);
}

inline Corpus load_corpus(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw_parse(path.string() + ": empty corpus file");
  json manifest = parse_json_strict(lines[0], path.string() + ":1");
  if (manifest.value("format", "") != "projlens-corpus")
    throw_parse(path.string() + ": not a projlens corpus file");

  Corpus c;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    json j = parse_json_strict(lines[i], path.string() + ":" + std::to_string(i + 1));
    const std::string type = j.value("type", "");
    if (type == "image") {
      ImageRecord im;
      im.image_id = j["id"].get<std::string>();
      im.width = j["width"].get<int>();
      im.height = j["height"].get<int>();
      im.uri = j["uri"].get<std::string>();
      c.images.push_back(std::move(im));
    } else if (type == "ann") {
      RegionAnnotation a;
      a.annotation_id = j["id"].get<std::string>();
      a.image_id = j["image_id"].get<std::string>();
      const auto& b = j["box"];
      a.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      a.raw_label = j["label"].get<std::string>();
      a.source = annotation_source_from_string(j["source"].get<std::string>());
      c.annotations.push_back(std::move(a));
    } else {
      throw_parse(path.string() + ":" + std::to_string(i + 1) + ": unknown record type");
    }
  }

  const std::string digest = detail::corpus_digest(c);
  if (digest != manifest.value("digest", ""))
    throw error(errc::dependency, path.string() + ": corpus digest mismatch (expected " +
                                      manifest.value("digest", "") + ", got " + digest + ")");
  c.provenance.source_desc = manifest.value("source_desc", "");
  c.provenance.ingested_at = manifest.value("ingested_at", "");
  c.provenance.digest = digest;
  return c;
}

}  // namespace projlens
