#include "stvla/policy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace stvla {

std::array<double, 8> SpatioTemporalAction::to_array() const {
  return {delta_x.x, delta_x.y, delta_x.z, delta_theta.x, delta_theta.y, delta_theta.z, grip, delta_t};
}

SpatioTemporalAction SpatioTemporalAction::from_array(std::span<const double> v) {
  if (v.size() != 8) throw std::invalid_argument("SpatioTemporalAction::from_array: expected 8 values");
  return {{v[0], v[1], v[2]}, {v[3], v[4], v[5]}, v[6], v[7]};
}

bool SpatioTemporalAction::finite() const {
  const auto a = to_array();
  return all_finite(a);
}

std::array<double, 7> ProprioState::to_array() const {
  return {position.x, position.y, position.z, orientation.x, orientation.y, orientation.z, grip_state};
}

// ---- vocabulary ----

std::string normalize_instruction(const std::string& text) {
  std::istringstream in(text);
  std::string word, out;
  while (in >> word) {
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

InstructionVocab::InstructionVocab(std::vector<std::string> words) {
  for (auto& w : words) w = normalize_instruction(w);
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  words.erase(std::remove(words.begin(), words.end(), std::string()), words.end());
  words_ = std::move(words);
  for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = i + 2;
}

std::size_t InstructionVocab::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw std::invalid_argument("tokenize: unknown word '" + word + "'");
  return it->second;
}

std::vector<std::size_t> InstructionVocab::tokenize(const std::string& text) const {
  std::istringstream in(normalize_instruction(text));
  std::vector<std::size_t> ids;
  std::vector<std::string> unknown;
  std::string word;
  while (in >> word) {
    auto it = index_.find(word);
    if (it == index_.end())
      unknown.push_back(word);
    else
      ids.push_back(it->second);
  }
  if (!unknown.empty()) {
    std::string msg = "tokenize: unknown word(s):";
    for (const auto& w : unknown) msg += " '" + w + "'";
    throw std::invalid_argument(msg);
  }
  return ids;
}

std::string InstructionVocab::detokenize(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (std::size_t id : ids) {
    if (id == pad_id || id == eos_id) continue;
    if (id - 2 >= words_.size()) throw std::invalid_argument("detokenize: id out of range");
    if (!out.empty()) out += ' ';
    out += words_[id - 2];
  }
  return out;
}

std::string InstructionVocab::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& w : words_) {
    for (unsigned char c : w) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- policy network ----

PolicyNet::PolicyNet(const PolicyConfig& cfg, Rng& rng) : cfg_(cfg) {
  const std::size_t d = cfg.d_model;
  visual_in_ = Linear(d, d, true, rng);
  visual_out_ = Linear(d, d, true, rng);
  proprio_in_ = Linear(cfg.proprio_dim, d, true, rng);
  proprio_out_ = Linear(d, d, true, rng);
  order_embed_ = randn({cfg.n_visual + 1 + cfg.max_lang, d}, 0.1, rng);
  token_table_ = randn({cfg.vocab_size, d}, 1.0, rng);
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    TransformerBlock b;
    b.wq = Linear(d, d, false, rng);
    b.wk = Linear(d, d, false, rng);
    b.wv = Linear(d, d, false, rng);
    b.wo = Linear(d, d, false, rng, 0.5);
    b.ff1 = Linear(d, cfg.ffn_mult * d, true, rng);
    b.ff2 = Linear(cfg.ffn_mult * d, d, true, rng, 0.5);
    blocks_.push_back(std::move(b));
  }
  head_in_ = Linear(d, d, true, rng);
  head_out_ = Linear(d, 8, true, rng, 0.1);
  probe_ = Linear(d, 4, true, rng);
  ground_ = Linear(d, 6, true, rng);
}

Tensor PolicyNet::project_tokens(const Tensor& f_v4d, const ProprioState& prop) const {
  const auto a = prop.to_array();
  return project_tokens(f_v4d, Tensor({1, a.size()}, std::vector<double>(a.begin(), a.end())));
}

Tensor PolicyNet::project_tokens(const Tensor& f_v4d, const Tensor& prop_row) const {
  if (f_v4d.rank() != 2 || f_v4d.dim(1) != cfg_.d_model)
    throw std::invalid_argument("project_tokens: visual width must be " + std::to_string(cfg_.d_model) + ", got " +
                                shape_str(f_v4d.shape()));
  if (prop_row.rank() != 2 || prop_row.dim(0) != 1 || prop_row.dim(1) != cfg_.proprio_dim)
    throw std::invalid_argument("project_tokens: proprio row must be [1," + std::to_string(cfg_.proprio_dim) + "]");
  const Tensor tv = visual_out_.forward(gelu(visual_in_.forward(f_v4d)));
  const Tensor tp = proprio_out_.forward(gelu(proprio_in_.forward(prop_row)));
  return concat({tv, tp}, 0);
}

Tensor PolicyNet::block_forward(const TransformerBlock& b, const Tensor& x, std::size_t index,
                                bool last_only) const {
  const std::size_t n = x.dim(0);
  const Tensor normed = rms_norm(x);
  const Tensor k = b.wk.forward(normed);
  const Tensor v = b.wv.forward(normed);
  const Tensor resid = last_only ? slice(x, 0, n - 1, 1) : x;
  const Tensor q = b.wq.forward(last_only ? slice(normed, 0, n - 1, 1) : normed);
  const Tensor attn = softmax(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(cfg_.d_model))), 1);
  const Tensor h = add(resid, b.wo.forward(matmul(attn, v)));
  const Tensor out = add(h, b.ff2.forward(gelu(b.ff1.forward(rms_norm(h)))));
  if (!all_finite(out.data())) throw numeric_blowup("numeric blowup in transformer block " + std::to_string(index));
  return out;
}

Tensor PolicyNet::encode(const Tensor& tokens, const std::vector<std::size_t>& lang_ids) const {
  if (tokens.rank() != 2 || tokens.dim(1) != cfg_.d_model)
    throw std::invalid_argument("forward: token width must be " + std::to_string(cfg_.d_model));
  if (lang_ids.size() + 1 > cfg_.max_lang)
    throw std::invalid_argument("forward: instruction longer than " + std::to_string(cfg_.max_lang - 1) + " words");
  std::vector<std::size_t> ids = lang_ids;
  ids.push_back(InstructionVocab::eos_id);
  for (std::size_t id : ids)
    if (id >= cfg_.vocab_size) throw std::invalid_argument("forward: token id out of vocabulary");
  const std::size_t len = tokens.dim(0) + ids.size();
  if (len > order_embed_.dim(0)) throw std::invalid_argument("forward: sequence longer than order table");
  Tensor x = add(concat({tokens, embedding(token_table_, ids)}, 0), slice(order_embed_, 0, 0, len));
  if (!all_finite(x.data())) throw numeric_blowup("numeric blowup in token embedding (layer 0)");
  for (std::size_t i = 0; i < blocks_.size(); ++i) x = block_forward(blocks_[i], x, i + 1, i + 1 == blocks_.size());
  if (blocks_.empty()) x = slice(x, 0, len - 1, 1);
  return rms_norm(x);
}

Tensor PolicyNet::head(const Tensor& hidden) const {
  const Tensor raw = head_out_.forward(gelu(head_in_.forward(hidden)));
  if (!all_finite(raw.data())) throw numeric_blowup("numeric blowup in action head");
  const auto parts = split(raw, 1, {3, 3, 1, 1});
  const Tensor dx = scale(tanh(parts[0]), cfg_.max_dx);
  const Tensor dth = scale(tanh(parts[1]), cfg_.max_dtheta);
  const Tensor grip = sigmoid(parts[2]);
  const Tensor dt = clamp_max(add_scalar(softplus(parts[3]), cfg_.dt_min), cfg_.dt_max);
  return concat({dx, dth, grip, dt}, 1);
}

Tensor PolicyNet::forward(const Tensor& tokens, const std::vector<std::size_t>& lang_ids) const {
  return head(encode(tokens, lang_ids));
}

SpatioTemporalAction PolicyNet::act(const Tensor& tokens, const std::vector<std::size_t>& lang_ids) const {
  return SpatioTemporalAction::from_array(forward(tokens, lang_ids).data());
}

std::size_t PolicyNet::apply_lora(std::size_t rank, double alpha, Rng& rng) {
  if (rank < 1 || rank >= cfg_.d_model)
    throw std::invalid_argument("apply_lora: rank must be in [1, " + std::to_string(cfg_.d_model) + ")");
  std::size_t n = 0;
  for (auto& b : blocks_)
    for (Linear* l : b.linears()) n += l->attach_lora(rank, alpha, rng);
  return n;
}

ParamList PolicyNet::projector_params() const {
  ParamList p;
  p.append(visual_in_.params(), "visual_in.");
  p.append(visual_out_.params(), "visual_out.");
  p.append(proprio_in_.params(), "proprio_in.");
  p.append(proprio_out_.params(), "proprio_out.");
  p.add("order_embed", order_embed_);
  return p;
}

ParamList PolicyNet::token_table_params() const {
  ParamList p;
  p.add("token_table", token_table_);
  return p;
}

namespace {
const char* const kLinearNames[] = {"wq.", "wk.", "wv.", "wo.", "ff1.", "ff2."};
}

ParamList PolicyNet::transformer_base_params() const {
  ParamList p;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto ls = blocks_[i].linears();
    for (std::size_t j = 0; j < ls.size(); ++j)
      p.append(ls[j]->base_params(), "block" + std::to_string(i) + "." + kLinearNames[j]);
  }
  return p;
}

ParamList PolicyNet::transformer_lora_params() const {
  ParamList p;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto ls = blocks_[i].linears();
    for (std::size_t j = 0; j < ls.size(); ++j)
      p.append(ls[j]->lora_params(), "block" + std::to_string(i) + "." + kLinearNames[j]);
  }
  return p;
}

ParamList PolicyNet::head_params() const {
  ParamList p;
  p.append(head_in_.params(), "head_in.");
  p.append(head_out_.params(), "head_out.");
  return p;
}

ParamList PolicyNet::alignment_head_params() const {
  ParamList p;
  p.append(probe_.params(), "probe.");
  p.append(ground_.params(), "ground.");
  return p;
}

ParamList PolicyNet::params() const {
  ParamList p;
  p.append(projector_params(), "");
  p.append(token_table_params(), "");
  p.append(transformer_base_params(), "");
  p.append(transformer_lora_params(), "");
  p.append(head_params(), "");
  p.append(alignment_head_params(), "");
  return p;
}

// ---- loss ----

Tensor action_loss(const Tensor& pred, const Tensor& gt, const ActionLossWeights& w) {
  if (pred.shape() != gt.shape() || pred.rank() != 2 || pred.dim(1) != 8)
    throw std::invalid_argument("action_loss: expected matching [B,8] shapes, got " + shape_str(pred.shape()) +
                                " and " + shape_str(gt.shape()));
  const Tensor weights = Tensor({8}, {w.dx, w.dx, w.dx, w.dtheta, w.dtheta, w.dtheta, w.grip, w.dt});
  return scale(sum(mul_trailing(abs(sub(pred, gt)), weights)), 1.0 / static_cast<double>(pred.dim(0)));
}

// ---- checkpoint IO ----

namespace {

constexpr char kMagic[8] = {'S', 'T', 'V', 'L', 'A', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("checkpoint " + path + ": truncated");
  return v;
}

std::string get_string(std::istream& in, const std::string& path) {
  const auto n = get<std::uint32_t>(in, path);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint " + path + ": corrupt string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw std::runtime_error("checkpoint " + path + ": truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointHeader& header, const ParamList& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof kMagic);
  put(out, header.version);
  put(out, header.d_model);
  put_string(out, header.layer_spec);
  put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.items()) {
    put_string(out, p.name);
    put(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) put(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(p.tensor.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

CheckpointHeader load_checkpoint(const std::string& path, const CheckpointHeader& expected, const ParamList& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kMagic))
    throw std::runtime_error("checkpoint " + path + ": bad magic");
  CheckpointHeader h;
  h.version = get<std::uint32_t>(in, path);
  if (h.version != expected.version)
    throw std::runtime_error("checkpoint " + path + ": version " + std::to_string(h.version) + ", expected " +
                             std::to_string(expected.version));
  h.d_model = get<std::uint32_t>(in, path);
  h.layer_spec = get_string(in, path);
  if (h.d_model != expected.d_model || h.layer_spec != expected.layer_spec)
    throw std::runtime_error("checkpoint " + path + ": architecture '" + h.layer_spec + "' (d_model " +
                             std::to_string(h.d_model) + ") does not match '" + expected.layer_spec + "'");
  const auto count = get<std::uint32_t>(in, path);
  if (count != params.size())
    throw std::runtime_error("checkpoint " + path + ": " + std::to_string(count) + " arrays, expected " +
                             std::to_string(params.size()));
  // Read everything first so a bad file leaves the parameters untouched.
  std::vector<std::vector<double>> values;
  for (const auto& p : params.items()) {
    const std::string name = get_string(in, path);
    if (name != p.name) throw std::runtime_error("checkpoint " + path + ": found '" + name + "', expected '" + p.name + "'");
    const auto rank = get<std::uint32_t>(in, path);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in, path)));
    if (shape != p.tensor.shape())
      throw std::runtime_error("checkpoint " + path + ": shape " + shape_str(shape) + " for '" + name + "', expected " +
                               shape_str(p.tensor.shape()));
    std::vector<double> v(p.tensor.numel());
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
      throw std::runtime_error("checkpoint " + path + ": truncated in '" + name + "'");
    values.push_back(std::move(v));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint " + path + ": trailing bytes");
  for (std::size_t i = 0; i < values.size(); ++i) {
    Tensor t = params.items()[i].tensor;
    std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
  }
  return h;
}

}  // namespace stvla
