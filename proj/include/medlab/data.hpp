#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medlab/model.hpp"
#include "medlab/rng.hpp"
#include "medlab/tensor.hpp"

namespace medlab {

// Whole-word vocabulary over the caption grammar. Specials occupy fixed
// low ids so token tensors are stable across runs.
class Vocabulary {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kBos = 1;
  static constexpr int64_t kEos = 2;
  static constexpr int64_t kUnk = 3;

  Vocabulary();
  int64_t size() const { return static_cast<int64_t>(words_.size()); }
  int64_t id_of(const std::string& word) const;  // kUnk when missing
  const std::string& word(int64_t id) const;

  // BOS/EOS framed. Unknown words map to UNK and warn once per word.
  std::vector<int64_t> tokenize(const std::string& caption) const;
  std::string detokenize(const std::vector<int64_t>& ids) const;  // specials skipped

 private:
  std::vector<std::string> words_;
};

enum class ObjShape { Circle = 0, Square = 1, Triangle = 2 };
enum class ObjColor { Red = 0, Green = 1, Blue = 2, Yellow = 3 };
// Diagonal is spoken as "and": the second object sits at the opposite corner.
enum class Relation { Above = 0, Below = 1, LeftOf = 2, RightOf = 3, Diagonal = 4 };

struct SceneObject {
  ObjShape shape = ObjShape::Circle;
  ObjColor color = ObjColor::Red;
  int cell = 0;  // 2x2 grid: 0 tl, 1 tr, 2 bl, 3 br
};

// One or two objects on a 2x2 grid. Two-object scenes occupy an unordered
// cell pair; the lower-numbered cell is always described first, so scenes,
// captions and rendered images are in pairwise bijection. The relation word
// is determined by the pair's geometry (above / leftof / "and" for the two
// diagonals), and the caption also states the second object's corner.
struct SceneSpec {
  std::vector<SceneObject> objects;  // 1 or 2
  bool has_relation = false;
  Relation relation = Relation::Above;
  int64_t scene_id = -1;

  std::string caption(const Vocabulary& v) const;
};

int64_t scene_count();                 // size of the enumerable scene space
SceneSpec scene_from_id(int64_t id);   // deterministic enumeration

// Anti-aliased flat-color rendering on a fixed background.
// Returns [3, size, size] in [0,1], dtype f32. Pure: same spec, same pixels.
Tensor render_scene(const SceneSpec& spec, int64_t size = 32);

struct PairedExample {
  int64_t scene_id = 0;
  Tensor image;                 // [3,S,S] f32
  std::string caption;
  std::vector<int64_t> tokens;  // BOS ... EOS
};

struct DatasetSpec {
  uint64_t seed = 0;
  int64_t n_train = 512;
  int64_t n_eval = 64;
  int64_t image_size = 32;
  bool augment_crop = false;    // random +-2px shift on train batches
  std::string prompt = "a";     // generation prompt prefix
  std::string grammar_version = "scene-grammar-v1";
};

struct Split {
  std::vector<PairedExample> items;
};

// Disjoint train/eval splits over a seed-shuffled scene enumeration.
// Throws CapacityError when n_train + n_eval exceeds the scene space.
std::pair<Split, Split> generate_dataset(const DatasetSpec& spec, const Vocabulary& vocab);

struct Batch {
  Tensor images;          // [B,3,S,S] f32
  TokenBatch tokens;      // padded to max in-batch length
  std::vector<int64_t> scene_ids;
};

// One epoch of shuffled batches. Draws shuffle order (and crop offsets when
// enabled) from rng, so successive calls yield different, seed-reproducible
// epochs. batch_size must be >= 2; a single leftover example is folded into
// the last batch rather than forming a batch of one.
std::vector<Batch> make_batches(const Split& split, int64_t batch_size, Rng& rng,
                                bool augment_crop = false);

// Flat binary export: images.bin (f32 little-endian) + index.json.
void export_pairs(const Split& split, const std::string& dir);

}  // namespace medlab
