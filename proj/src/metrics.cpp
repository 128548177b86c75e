#include "medlab/metrics.hpp"

#include <algorithm>
#include <map>

namespace medlab {

namespace {

TokenBatch pack_tokens(const Split& split, int64_t from, int64_t count) {
  int64_t maxlen = 0;
  for (int64_t i = 0; i < count; ++i)
    maxlen = std::max(maxlen, (int64_t)split.items[(size_t)(from + i)].tokens.size());
  TokenBatch tb;
  tb.batch = count;
  tb.len = maxlen;
  tb.ids.assign((size_t)(count * maxlen), Vocabulary::kPad);
  tb.mask.assign((size_t)(count * maxlen), 0);
  for (int64_t i = 0; i < count; ++i) {
    const auto& toks = split.items[(size_t)(from + i)].tokens;
    for (size_t t = 0; t < toks.size(); ++t) {
      tb.ids[(size_t)(i * maxlen) + t] = toks[t];
      tb.mask[(size_t)(i * maxlen) + t] = 1;
    }
  }
  return tb;
}

Tensor pack_images(const Split& split, int64_t from, int64_t count, DType dt) {
  int64_t S = split.items[(size_t)from].image.dim(1);
  Tensor out = Tensor::zeros({count, 3, S, S}, dt);
  for (int64_t i = 0; i < count; ++i) {
    const Tensor& img = split.items[(size_t)(from + i)].image;
    for (int64_t j = 0; j < img.numel(); ++j) out.set(i * img.numel() + j, img.at(j));
  }
  return out;
}

}  // namespace

std::pair<Tensor, Tensor> embed_split(MEDModel& m, const Split& split, int64_t batch_size) {
  int64_t n = (int64_t)split.items.size();
  int64_t e = m.cfg.resolved_itc_dim();
  Tensor img_emb = Tensor::zeros({n, e}, DType::F64);
  Tensor txt_emb = Tensor::zeros({n, e}, DType::F64);
  for (int64_t from = 0; from < n; from += batch_size) {
    int64_t count = std::min(batch_size, n - from);
    Graph g(m.dtype);
    Var ie = encode_image(g, m, pack_images(split, from, count, m.dtype), nullptr);
    Var te = encode_text(g, m, pack_tokens(split, from, count), nullptr);
    const Tensor& iv = g.value(ie);
    const Tensor& tv = g.value(te);
    for (int64_t i = 0; i < count; ++i)
      for (int64_t j = 0; j < e; ++j) {
        img_emb.set((from + i) * e + j, iv.at(i * e + j));
        txt_emb.set((from + i) * e + j, tv.at(i * e + j));
      }
  }
  return {std::move(img_emb), std::move(txt_emb)};
}

RetrievalResult retrieval_from_embeddings(const Tensor& image_emb, const Tensor& text_emb,
                                          const std::vector<int64_t>& ks) {
  if (image_emb.rank() != 2 || image_emb.shape() != text_emb.shape())
    throw ShapeError("retrieval: embeddings " + shape_str(image_emb.shape()) + " vs " +
                     shape_str(text_emb.shape()));
  int64_t n = image_emb.dim(0), d = image_emb.dim(1);
  Tensor sim = Tensor::zeros({n, n}, DType::F64);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (int64_t k = 0; k < d; ++k) s += image_emb.at(i * d + k) * text_emb.at(j * d + k);
      sim.set(i * n + j, s);
    }

  // rank of the true match with ties resolved toward the lower index
  auto rank_in_row = [&](int64_t i) {
    double own = sim.at(i * n + i);
    int64_t rank = 0;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double v = sim.at(i * n + j);
      if (v > own || (v == own && j < i)) ++rank;
    }
    return rank;
  };
  auto rank_in_col = [&](int64_t j) {
    double own = sim.at(j * n + j);
    int64_t rank = 0;
    for (int64_t i = 0; i < n; ++i) {
      if (i == j) continue;
      double v = sim.at(i * n + j);
      if (v > own || (v == own && i < j)) ++rank;
    }
    return rank;
  };

  RetrievalResult r;
  r.similarity = sim;
  for (int64_t k : ks) {
    int64_t tr_hits = 0, ir_hits = 0;
    for (int64_t i = 0; i < n; ++i) {
      if (rank_in_row(i) < k) ++tr_hits;
      if (rank_in_col(i) < k) ++ir_hits;
    }
    r.tr[k] = (double)tr_hits / (double)n;
    r.ir[k] = (double)ir_hits / (double)n;
  }
  return r;
}

RetrievalResult retrieval_eval(MEDModel& m, const Split& split, const std::vector<int64_t>& ks,
                               int64_t batch_size) {
  auto [img, txt] = embed_split(m, split, batch_size);
  return retrieval_from_embeddings(img, txt, ks);
}

CaptionResult caption_scores(const std::vector<std::string>& generated,
                             const std::vector<std::string>& references) {
  if (generated.size() != references.size())
    throw ContractError("caption_scores: " + std::to_string(generated.size()) + " generations vs " +
                        std::to_string(references.size()) + " references");
  auto words_of = [](const std::string& s) {
    std::map<std::string, int64_t> counts;
    std::string w;
    int64_t total = 0;
    for (char c : s) {
      if (c == ' ') {
        if (!w.empty()) {
          counts[w]++;
          ++total;
          w.clear();
        }
      } else {
        w += c;
      }
    }
    if (!w.empty()) {
      counts[w]++;
      ++total;
    }
    return std::pair(counts, total);
  };

  CaptionResult r;
  size_t n = generated.size();
  if (n == 0) return r;
  for (size_t i = 0; i < n; ++i) {
    if (generated[i] == references[i]) r.exact_match += 1.0;
    auto [gc, gn] = words_of(generated[i]);
    auto [rc, rn] = words_of(references[i]);
    int64_t overlap = 0;
    for (auto& [w, c] : gc) {
      auto it = rc.find(w);
      if (it != rc.end()) overlap += std::min(c, it->second);
    }
    if (overlap > 0 && gn > 0 && rn > 0) {
      double p = (double)overlap / (double)gn;
      double rec = (double)overlap / (double)rn;
      r.token_f1 += 2.0 * p * rec / (p + rec);
    }
  }
  r.exact_match /= (double)n;
  r.token_f1 /= (double)n;
  return r;
}

CaptionResult caption_eval(MEDModel& m, const Split& split, const Vocabulary& vocab,
                           const std::string& prompt, int64_t batch_size) {
  std::vector<int64_t> prompt_ids;
  {
    auto framed = vocab.tokenize(prompt);
    prompt_ids.assign(framed.begin() + 1, framed.end() - 1);  // strip BOS/EOS
  }
  std::vector<std::string> gens, refs;
  int64_t n = (int64_t)split.items.size();
  for (int64_t from = 0; from < n; from += batch_size) {
    int64_t count = std::min(batch_size, n - from);
    Tensor images = pack_images(split, from, count, m.dtype);
    auto rows = generate_greedy(m, images, prompt_ids, m.cfg.text.max_len, Vocabulary::kBos,
                                Vocabulary::kEos);
    for (int64_t i = 0; i < count; ++i) {
      gens.push_back(vocab.detokenize(rows[(size_t)i]));
      refs.push_back(split.items[(size_t)(from + i)].caption);
    }
  }
  return caption_scores(gens, refs);
}

}  // namespace medlab
