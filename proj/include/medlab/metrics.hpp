#pragma once

#include <map>
#include <string>
#include <vector>

#include "medlab/data.hpp"
#include "medlab/model.hpp"

namespace medlab {

struct RetrievalResult {
  std::map<int64_t, double> tr;  // image -> text recall@k
  std::map<int64_t, double> ir;  // text -> image recall@k
  Tensor similarity;             // [N,N], rows = images
};

// Pure ranking over a full similarity matrix built from the given embedding
// rows (images x texts). Ties break toward the lower index.
RetrievalResult retrieval_from_embeddings(const Tensor& image_emb, const Tensor& text_emb,
                                          const std::vector<int64_t>& ks);

// Embeds the split with the model's unimodal encoders and ranks.
RetrievalResult retrieval_eval(MEDModel& m, const Split& split, const std::vector<int64_t>& ks,
                               int64_t batch_size = 32);

struct CaptionResult {
  double exact_match = 0;
  double token_f1 = 0;
};

// Pure scoring of generated captions against references.
CaptionResult caption_scores(const std::vector<std::string>& generated,
                             const std::vector<std::string>& references);

// Greedy-decodes a caption per eval image and scores it.
CaptionResult caption_eval(MEDModel& m, const Split& split, const Vocabulary& vocab,
                           const std::string& prompt, int64_t batch_size = 32);

// ITC image/text embeddings for a whole split, [N, itc_dim] each.
std::pair<Tensor, Tensor> embed_split(MEDModel& m, const Split& split, int64_t batch_size = 32);

}  // namespace medlab
