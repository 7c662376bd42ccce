#include "oscar/evalmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

#include "oscar/errors.hpp"

namespace oscar {

std::string normalize(const std::string& s) {
  std::string lower;
  lower.reserve(s.size());
  for (char ch : s) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));

  std::string no_punct;
  no_punct.reserve(lower.size());
  for (char ch : lower)
    if (!std::ispunct(static_cast<unsigned char>(ch))) no_punct += ch;

  std::istringstream is(no_punct);
  std::string w, out;
  while (is >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

int accuracy(const std::string& prediction, const std::vector<std::string>& labels) {
  if (labels.empty()) throw DataError("accuracy: need at least one label");
  std::string pred = normalize(prediction);
  for (const auto& label : labels) {
    std::string l = normalize(label);
    if (!l.empty() && pred.find(l) != std::string::npos) return 1;
    if (l.empty() && pred.empty()) return 1;
  }
  return 0;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "variant,accuracy,count\n";
  for (const auto& [name, acc] : accuracy_by_variant) {
    auto it = counts.find(name);
    os << name << "," << acc << "," << (it == counts.end() ? 0 : it->second) << "\n";
  }
  for (const auto& name : missing) os << name << ",absent,0\n";
  return os.str();
}

std::string EvalReport::to_json() const {
  std::ostringstream os;
  os << "{\n  \"accuracy\": {";
  bool first = true;
  for (const auto& [name, acc] : accuracy_by_variant) {
    os << (first ? "" : ", ") << "\"" << name << "\": " << acc;
    first = false;
  }
  os << "},\n  \"counts\": {";
  first = true;
  for (const auto& [name, c] : counts) {
    os << (first ? "" : ", ") << "\"" << name << "\": " << c;
    first = false;
  }
  os << "},\n  \"missing\": [";
  for (size_t i = 0; i < missing.size(); i++) os << (i ? ", " : "") << "\"" << missing[i] << "\"";
  os << "]\n}\n";
  return os.str();
}

double cosine(const float* a, const float* b, int n) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < n; i++) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::string ProbeResult::to_csv() const {
  std::ostringstream os;
  os << "position,cosine\n";
  for (size_t i = 0; i < cosines.size(); i++) os << i << "," << cosines[i] << "\n";
  return os.str();
}

ProbeResult needle_probe(const Compressor& compressor, const TransformerModel& generator,
                         const std::vector<int>& doc_tokens, int needle_begin, int needle_end,
                         const std::vector<int>& query_tokens, bool trained) {
  if (needle_begin < 0 || needle_end > static_cast<int>(doc_tokens.size()) ||
      needle_begin >= needle_end)
    throw DataError("needle_probe: needle span outside document");
  NoGradGuard ng;
  ProbeResult out;
  out.needle_begin = needle_begin;
  out.needle_end = needle_end;
  out.trained_flag = trained;
  if (!trained)
    std::fprintf(stderr, "[probe] warning: probing an untrained checkpoint\n");

  CompressedDoc cd = compressor.compress(query_tokens, doc_tokens);
  int l = cd.embeddings.dim(0), d = cd.embeddings.dim(1);
  out.cosines.resize(doc_tokens.size());
  for (size_t p = 0; p < doc_tokens.size(); p++) {
    const float* tok_emb = generator.embedding.ptr() +
                           static_cast<size_t>(doc_tokens[p]) * generator.cfg.d_model;
    float best = -1.0f;
    for (int j = 0; j < l; j++) {
      float c = static_cast<float>(cosine(cd.embeddings.ptr() + static_cast<size_t>(j) * d,
                                          tok_emb, d));
      best = std::max(best, c);
    }
    out.cosines[p] = best;
  }
  out.argmax_pos = static_cast<int>(
      std::max_element(out.cosines.begin(), out.cosines.end()) - out.cosines.begin());
  out.top_tokens = logit_attribution(generator, cd, 10);
  return out;
}

std::vector<std::vector<int>> logit_attribution(const TransformerModel& generator,
                                                const CompressedDoc& compressed, int top_n) {
  if (compressed.embeddings.dim(1) != generator.cfg.d_model)
    throw DimensionError("logit_attribution: embedding width " +
                         std::to_string(compressed.embeddings.dim(1)) + " vs generator " +
                         std::to_string(generator.cfg.d_model));
  NoGradGuard ng;
  int l = compressed.embeddings.dim(0);
  int V = generator.cfg.vocab_size;
  // raw projection through the unembedding, no final norm: the probe asks
  // which vocabulary directions the embedding itself points at
  Tensor logits = generator.cfg.tied_unembedding
                      ? matmul_nt(compressed.embeddings, generator.embedding)
                      : matmul(compressed.embeddings, generator.unembedding.w);
  std::vector<std::vector<int>> out(l);
  for (int j = 0; j < l; j++) {
    const float* row = logits.ptr() + static_cast<size_t>(j) * V;
    std::vector<int> idx(V);
    std::iota(idx.begin(), idx.end(), 0);
    int n = std::min(top_n, V);
    std::partial_sort(idx.begin(), idx.begin() + n, idx.end(),
                      [&](int a, int b) { return row[a] != row[b] ? row[a] > row[b] : a < b; });
    out[j].assign(idx.begin(), idx.begin() + n);
  }
  return out;
}

double spearman(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size() || a.size() < 2) throw DataError("spearman: need two equal lists");
  auto ranks = [](const std::vector<float>& v) {
    int n = static_cast<int>(v.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) { return v[x] < v[y]; });
    std::vector<double> r(n);
    int i = 0;
    while (i < n) {
      int j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) j++;
      double avg = (i + j) / 2.0 + 1.0;  // average rank for ties
      for (int t = i; t <= j; t++) r[order[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  auto ra = ranks(a), rb = ranks(b);
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < ra.size(); i++) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= ra.size();
  mb /= rb.size();
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < ra.size(); i++) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace oscar
