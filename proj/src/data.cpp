#include "medlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "medlab/errors.hpp"

namespace medlab {

namespace {

const char* kShapeWords[] = {"circle", "square", "triangle"};
const char* kColorWords[] = {"red", "green", "blue", "yellow"};
const char* kRelationWords[] = {"above", "below", "leftof", "rightof", "and"};
const char* kRowWords[] = {"top", "bottom"};
const char* kColWords[] = {"left", "right"};

// Unordered cell pairs with a canonical anchor (the lower-numbered cell is
// described first) so that every rendered image has exactly one caption.
// Describing both orderings would create caption pairs like "X leftof Y" /
// "Y rightof X" over identical pixels, which caps exact-match captioning
// at chance between the two. Diagonal pairs use "and" (the opposite corner
// is implied). below/rightof stay in the vocabulary but no scene emits them.
struct CellRel {
  int cell1;
  Relation rel;
  int cell2;
};
constexpr CellRel kCellRels[] = {
    {0, Relation::LeftOf, 1}, {2, Relation::LeftOf, 3},
    {0, Relation::Above, 2},  {1, Relation::Above, 3},
    {0, Relation::Diagonal, 3}, {1, Relation::Diagonal, 2},
};
constexpr int kNumCellRels = 6;
constexpr int kNumShapeColor = 12;  // 3 shapes x 4 colors
constexpr int64_t kOneObjScenes = kNumShapeColor * 4;

double shape_coverage(ObjShape shape, double x, double y, double cx, double cy) {
  switch (shape) {
    case ObjShape::Circle: {
      double dx = x - cx, dy = y - cy;
      return dx * dx + dy * dy <= 5.8 * 5.8 ? 1.0 : 0.0;
    }
    case ObjShape::Square:
      return std::abs(x - cx) <= 5.0 && std::abs(y - cy) <= 5.0 ? 1.0 : 0.0;
    case ObjShape::Triangle: {
      // upward triangle: apex (cx, cy-6), base (cx+-6, cy+5)
      double ax = cx, ay = cy - 6.0;
      double bx = cx - 6.0, by = cy + 5.0;
      double ex = cx + 6.0, ey = cy + 5.0;
      auto side = [&](double x1, double y1, double x2, double y2) {
        return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
      };
      double d1 = side(ax, ay, bx, by);
      double d2 = side(bx, by, ex, ey);
      double d3 = side(ex, ey, ax, ay);
      bool neg = d1 < 0 || d2 < 0 || d3 < 0;
      bool pos = d1 > 0 || d2 > 0 || d3 > 0;
      return !(neg && pos) ? 1.0 : 0.0;
    }
  }
  return 0.0;
}

void object_rgb(ObjColor c, double rgb[3]) {
  switch (c) {
    case ObjColor::Red: rgb[0] = 0.85; rgb[1] = 0.16; rgb[2] = 0.12; break;
    case ObjColor::Green: rgb[0] = 0.15; rgb[1] = 0.75; rgb[2] = 0.20; break;
    case ObjColor::Blue: rgb[0] = 0.15; rgb[1] = 0.30; rgb[2] = 0.85; break;
    case ObjColor::Yellow: rgb[0] = 0.90; rgb[1] = 0.85; rgb[2] = 0.15; break;
  }
}

constexpr double kBackground = 0.12;

std::set<std::string>& warned_words() {
  static std::set<std::string> w;
  return w;
}

}  // namespace

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<bos>", "<eos>", "<unk>", "a"};
  for (const char* w : kColorWords) words_.push_back(w);
  for (const char* w : kShapeWords) words_.push_back(w);
  words_.push_back("at");
  for (const char* w : kRowWords) words_.push_back(w);
  for (const char* w : kColWords) words_.push_back(w);
  for (const char* w : kRelationWords) words_.push_back(w);
}

int64_t Vocabulary::id_of(const std::string& word) const {
  for (size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == word) return static_cast<int64_t>(i);
  return kUnk;
}

const std::string& Vocabulary::word(int64_t id) const {
  if (id < 0 || id >= size()) throw IndexError("vocabulary id " + std::to_string(id));
  return words_[static_cast<size_t>(id)];
}

std::vector<int64_t> Vocabulary::tokenize(const std::string& caption) const {
  std::vector<int64_t> ids{kBos};
  std::istringstream is(caption);
  std::string w;
  while (is >> w) {
    int64_t id = id_of(w);
    if (id == kUnk && warned_words().insert(w).second)
      std::cerr << "[vocab] warning: unknown word '" << w << "' mapped to <unk>\n";
    ids.push_back(id);
  }
  ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::detokenize(const std::vector<int64_t>& ids) const {
  std::string out;
  for (int64_t id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

std::string SceneSpec::caption(const Vocabulary&) const {
  auto describe = [](const SceneObject& o) {
    std::string s = "a ";
    s += kColorWords[static_cast<int>(o.color)];
    s += ' ';
    s += kShapeWords[static_cast<int>(o.shape)];
    s += " at ";
    s += kRowWords[o.cell / 2];
    s += ' ';
    s += kColWords[o.cell % 2];
    return s;
  };
  std::string s = describe(objects.front());
  if (has_relation) {
    s += ' ';
    s += kRelationWords[static_cast<int>(relation)];
    s += ' ';
    s += describe(objects[1]);
  }
  return s;
}

int64_t scene_count() {
  return kOneObjScenes + static_cast<int64_t>(kNumShapeColor) * kNumCellRels * kNumShapeColor;
}

SceneSpec scene_from_id(int64_t id) {
  if (id < 0 || id >= scene_count()) throw IndexError("scene id " + std::to_string(id));
  SceneSpec spec;
  spec.scene_id = id;
  auto sc_obj = [](int sc) {
    SceneObject o;
    o.shape = static_cast<ObjShape>(sc / 4);
    o.color = static_cast<ObjColor>(sc % 4);
    return o;
  };
  if (id < kOneObjScenes) {
    SceneObject o = sc_obj(static_cast<int>(id / 4));
    o.cell = static_cast<int>(id % 4);
    spec.objects.push_back(o);
    return spec;
  }
  int64_t idx = id - kOneObjScenes;
  int sc2 = static_cast<int>(idx % kNumShapeColor);
  idx /= kNumShapeColor;
  int pair = static_cast<int>(idx % kNumCellRels);
  int sc1 = static_cast<int>(idx / kNumCellRels);
  const CellRel& cr = kCellRels[pair];
  SceneObject o1 = sc_obj(sc1);
  o1.cell = cr.cell1;
  SceneObject o2 = sc_obj(sc2);
  o2.cell = cr.cell2;
  spec.objects = {o1, o2};
  spec.has_relation = true;
  spec.relation = cr.rel;
  return spec;
}

Tensor render_scene(const SceneSpec& spec, int64_t size) {
  Tensor img = Tensor::full({3, size, size}, kBackground, DType::F32);
  int64_t half = size / 2;
  const int ss = 4;  // supersampling grid per pixel
  for (const SceneObject& obj : spec.objects) {
    double rgb[3];
    object_rgb(obj.color, rgb);
    int64_t x0 = (obj.cell % 2) * half;
    int64_t y0 = (obj.cell / 2) * half;
    // geometry is defined on a 16x16 cell; scale for other sizes
    double scale = static_cast<double>(half) / 16.0;
    double cx = 8.0, cy = 8.0;
    for (int64_t py = 0; py < half; ++py) {
      for (int64_t px = 0; px < half; ++px) {
        double cov = 0.0;
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx) {
            double x = (px + (sx + 0.5) / ss) / scale;
            double y = (py + (sy + 0.5) / ss) / scale;
            cov += shape_coverage(obj.shape, x, y, cx, cy);
          }
        cov /= ss * ss;
        if (cov <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          int64_t at = c * size * size + (y0 + py) * size + (x0 + px);
          double v = img.at(at);
          img.set(at, v + cov * (rgb[c] - v));
        }
      }
    }
  }
  return img;
}

std::pair<Split, Split> generate_dataset(const DatasetSpec& spec, const Vocabulary& vocab) {
  int64_t total = scene_count();
  if (spec.n_train < 0 || spec.n_eval < 0 || spec.n_train + spec.n_eval > total)
    throw CapacityError("dataset asks for " + std::to_string(spec.n_train + spec.n_eval) +
                        " scenes but only " + std::to_string(total) + " exist");
  std::vector<int64_t> ids(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) ids[(size_t)i] = i;
  Rng rng = Rng(spec.seed).fork("scene-split");
  rng.shuffle(ids);

  auto build = [&](int64_t from, int64_t count) {
    Split s;
    s.items.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      PairedExample ex;
      ex.scene_id = ids[(size_t)(from + i)];
      SceneSpec scene = scene_from_id(ex.scene_id);
      ex.image = render_scene(scene, spec.image_size);
      ex.caption = scene.caption(vocab);
      ex.tokens = vocab.tokenize(ex.caption);
      s.items.push_back(std::move(ex));
    }
    return s;
  };
  Split train = build(0, spec.n_train);
  Split eval = build(spec.n_train, spec.n_eval);
  return {std::move(train), std::move(eval)};
}

namespace {

Tensor shift_image(const Tensor& img, int dx, int dy) {
  Tensor out = Tensor::full(img.shape(), kBackground, DType::F32);
  int64_t S = img.dim(1);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        int64_t sy = y - dy, sx = x - dx;
        if (sy < 0 || sy >= S || sx < 0 || sx >= S) continue;
        out.set(c * S * S + y * S + x, img.at(c * S * S + sy * S + sx));
      }
  return out;
}

}  // namespace

std::vector<Batch> make_batches(const Split& split, int64_t batch_size, Rng& rng,
                                bool augment_crop) {
  if (batch_size < 2)
    throw ContractError("batch_size must be >= 2 (contrastive/matching losses need negatives)");
  int64_t n = static_cast<int64_t>(split.items.size());
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[(size_t)i] = i;
  rng.shuffle(order);

  std::vector<Batch> out;
  int64_t pos = 0;
  while (pos < n) {
    int64_t take = std::min(batch_size, n - pos);
    // never leave a single straggler: fold it into this batch
    if (n - pos - take == 1) take += 1;
    std::vector<const PairedExample*> items;
    for (int64_t i = 0; i < take; ++i)
      items.push_back(&split.items[(size_t)order[(size_t)(pos + i)]]);
    pos += take;

    int64_t S = items[0]->image.dim(1);
    int64_t maxlen = 0;
    for (auto* ex : items)
      maxlen = std::max(maxlen, static_cast<int64_t>(ex->tokens.size()));
    Batch b;
    b.images = Tensor::zeros({take, 3, S, S}, DType::F32);
    b.tokens.batch = take;
    b.tokens.len = maxlen;
    b.tokens.ids.assign(static_cast<size_t>(take * maxlen), Vocabulary::kPad);
    b.tokens.mask.assign(static_cast<size_t>(take * maxlen), 0);
    for (int64_t i = 0; i < take; ++i) {
      const PairedExample& ex = *items[(size_t)i];
      Tensor img = ex.image;
      if (augment_crop) {
        int dx = static_cast<int>(rng.below(5)) - 2;
        int dy = static_cast<int>(rng.below(5)) - 2;
        if (dx || dy) img = shift_image(img, dx, dy);
      }
      auto src = img.data<float>();
      auto dst = b.images.data<float>();
      std::copy_n(src.data(), src.size(), dst.data() + i * 3 * S * S);
      for (size_t t = 0; t < ex.tokens.size(); ++t) {
        b.tokens.ids[(size_t)(i * maxlen) + t] = ex.tokens[t];
        b.tokens.mask[(size_t)(i * maxlen) + t] = 1;
      }
      b.scene_ids.push_back(ex.scene_id);
    }
    out.push_back(std::move(b));
  }
  return out;
}

void export_pairs(const Split& split, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream bin(dir + "/images.bin", std::ios::binary);
  std::ostringstream index;
  index << "[\n";
  int64_t offset = 0;
  for (size_t i = 0; i < split.items.size(); ++i) {
    const PairedExample& ex = split.items[i];
    auto data = ex.image.data<float>();
    bin.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (i) index << ",\n";
    index << "  {\"scene_id\": " << ex.scene_id << ", \"offset\": " << offset
          << ", \"shape\": [3, " << ex.image.dim(1) << ", " << ex.image.dim(2)
          << "], \"caption\": \"" << ex.caption << "\"}";
    offset += static_cast<int64_t>(data.size() * sizeof(float));
  }
  index << "\n]\n";
  std::ofstream idx(dir + "/index.json");
  idx << index.str();
}

}  // namespace medlab
