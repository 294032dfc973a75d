#include "qpm/config.hpp"

#include <fstream>
#include <set>

#include "qpm/error.hpp"

namespace qpm {

using nlohmann::json;

ImageSpec ExperimentConfig::image_spec() const {
  ImageSpec s;
  s.height = model.backbone.input_height;
  s.width = model.backbone.input_width;
  return s;
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  retrieval.validate();
  if (data.synthetic()) data.synth.validate();
}

ExperimentConfig desk_scale_config() {
  ExperimentConfig c;
  c.model.backbone.input_height = 64;
  c.model.backbone.input_width = 32;
  c.model.backbone.output_channels = 64;
  c.model.backbone.spatial_stride = 8;
  c.model.backbone.parts = 4;
  c.model.embed_dim = 64;
  c.model.global_channels = 64;
  c.model.num_classes = c.data.synth.num_identities;
  c.model.detach_global_quality = true;
  c.train.P = 8;
  c.train.A = 4;
  c.train.epochs = 30;
  c.train.lr_decay_period = 20;
  c.train.base_lr = 0.05;
  c.train.momentum = 0.9;
  return c;
}

namespace {

/// Reads typed fields from one JSON object and rejects keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where("") + "expected an object");
  }

  void get(const char* key, int& out) {
    if (const json* v = field(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + "expected an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = field(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) {
        throw ConfigError(where(key) + "expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = field(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = field(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = field(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<int>& out) {
    if (const json* v = field(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + "expected an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) throw ConfigError(where(key) + "expected integers");
        out.push_back(e.get<int>());
      }
    }
  }
  std::vector<std::string> strings(const char* key) {
    std::vector<std::string> out;
    if (const json* v = field(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + "expected an array of strings");
      for (const auto& e : *v) {
        if (!e.is_string()) throw ConfigError(where(key) + "expected strings");
        out.push_back(e.get<std::string>());
      }
    }
    return out;
  }
  bool has(const char* key) const { return j_.contains(key); }
  /// Marks `key` as consumed and returns it for a nested reader.
  const json* child(const char* key) { return field(key); }
  std::string path(const char* key) const { return path_ + key + "."; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + path_ + key + "'");
    }
  }

 private:
  const json* field(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const char* key) const { return "config key '" + path_ + key + "': "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const ModelConfig& c) {
  const auto& b = c.backbone;
  return {{"backbone",
           {{"variant", to_string(b.variant)},
            {"output_channels", b.output_channels},
            {"spatial_stride", b.spatial_stride},
            {"input_height", b.input_height},
            {"input_width", b.input_width},
            {"parts", b.parts},
            {"base_width", b.base_width},
            {"stage_blocks", b.stage_blocks}}},
          {"embed_dim", c.embed_dim},
          {"global_channels", c.global_channels},
          {"reduction", c.reduction},
          {"num_classes", c.num_classes},
          {"use_quality", c.use_quality},
          {"use_isa", c.use_isa},
          {"global_mode", to_string(c.global_mode)},
          {"excite_bias", c.excite_bias},
          {"detach_global_quality", c.detach_global_quality},
          {"init_seed", c.init_seed}};
}

json to_json(const TrainConfig& c) {
  const auto& e = c.erase;
  const auto& l = c.losses;
  return {{"P", c.P},
          {"A", c.A},
          {"epochs", c.epochs},
          {"base_lr", c.base_lr},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_period", c.lr_decay_period},
          {"margin", c.margin},
          {"momentum", c.momentum},
          {"flip_probability", c.flip_probability},
          {"erase",
           {{"probability", e.probability},
            {"area_min", e.area_min},
            {"area_max", e.area_max},
            {"aspect_min", e.aspect_min},
            {"aspect_max", e.aspect_max},
            {"fill", e.fill}}},
          {"losses",
           {{"part_id", l.part_id},
            {"part_tp", l.part_tp},
            {"global_id", l.global_id},
            {"sg_id", l.sg_id},
            {"global_tp", l.global_tp}}},
          {"sg_include_diagonal", c.sg_include_diagonal},
          {"iterations_per_epoch", c.iterations_per_epoch},
          {"seed", c.seed},
          {"diagnostics_path", c.diagnostics_path}};
}

json to_json(const RetrievalConfig& c) {
  return {{"n", c.n}, {"gamma", c.gamma}, {"protocol", to_string(c.protocol)},
          {"max_rank", c.max_rank}};
}

json to_json(const DataConfig& c) {
  const auto& s = c.synth;
  json kinds = json::array(), sides = json::array();
  for (auto k : s.occluder_kinds) kinds.push_back(to_string(k));
  for (auto side : s.sides) sides.push_back(to_string(side));
  return {{"root", c.root},
          {"drop_distractors", c.load.drop_distractors},
          {"synthetic",
           {{"num_identities", s.num_identities},
            {"test_identities", s.test_identities},
            {"images_per_identity", s.images_per_identity},
            {"queries_per_identity", s.queries_per_identity},
            {"height", s.height},
            {"width", s.width},
            {"cameras", s.cameras},
            {"occlusion_probability", s.occlusion_probability},
            {"gallery_occlusion_probability", s.gallery_occlusion_probability},
            {"occluder_kinds", kinds},
            {"sides", sides},
            {"cover_min", s.cover_min},
            {"cover_max", s.cover_max},
            {"seed", s.seed}}}};
}

json to_json(const ExperimentConfig& c) {
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"retrieval", to_json(c.retrieval)},
          {"data", to_json(c.data)}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  Reader r(j, "model.");
  if (const json* bj = r.child("backbone")) {
    Reader b(*bj, r.path("backbone"));
    auto& bb = c.backbone;
    std::string variant = to_string(bb.variant);
    b.get("variant", variant);
    bb.variant = backbone_variant_from_string(variant);
    b.get("output_channels", bb.output_channels);
    b.get("spatial_stride", bb.spatial_stride);
    b.get("input_height", bb.input_height);
    b.get("input_width", bb.input_width);
    b.get("parts", bb.parts);
    b.get("base_width", bb.base_width);
    b.get("stage_blocks", bb.stage_blocks);
    b.finish();
  }
  r.get("embed_dim", c.embed_dim);
  r.get("global_channels", c.global_channels);
  r.get("reduction", c.reduction);
  r.get("num_classes", c.num_classes);
  r.get("use_quality", c.use_quality);
  r.get("use_isa", c.use_isa);
  std::string mode = to_string(c.global_mode);
  r.get("global_mode", mode);
  c.global_mode = global_mode_from_string(mode);
  r.get("excite_bias", c.excite_bias);
  r.get("detach_global_quality", c.detach_global_quality);
  r.get("init_seed", c.init_seed);
  r.finish();
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  Reader r(j, "train.");
  r.get("P", c.P);
  r.get("A", c.A);
  r.get("epochs", c.epochs);
  r.get("base_lr", c.base_lr);
  r.get("lr_decay_factor", c.lr_decay_factor);
  r.get("lr_decay_period", c.lr_decay_period);
  r.get("margin", c.margin);
  r.get("momentum", c.momentum);
  r.get("flip_probability", c.flip_probability);
  if (const json* ej = r.child("erase")) {
    Reader e(*ej, r.path("erase"));
    e.get("probability", c.erase.probability);
    e.get("area_min", c.erase.area_min);
    e.get("area_max", c.erase.area_max);
    e.get("aspect_min", c.erase.aspect_min);
    e.get("aspect_max", c.erase.aspect_max);
    e.get("fill", c.erase.fill);
    e.finish();
  }
  if (const json* lj = r.child("losses")) {
    Reader l(*lj, r.path("losses"));
    l.get("part_id", c.losses.part_id);
    l.get("part_tp", c.losses.part_tp);
    l.get("global_id", c.losses.global_id);
    l.get("sg_id", c.losses.sg_id);
    l.get("global_tp", c.losses.global_tp);
    l.finish();
  }
  r.get("sg_include_diagonal", c.sg_include_diagonal);
  r.get("iterations_per_epoch", c.iterations_per_epoch);
  r.get("seed", c.seed);
  r.get("diagnostics_path", c.diagnostics_path);
  r.finish();
  return c;
}

RetrievalConfig retrieval_config_from_json(const json& j, RetrievalConfig c) {
  Reader r(j, "retrieval.");
  r.get("n", c.n);
  r.get("gamma", c.gamma);
  std::string protocol = to_string(c.protocol);
  r.get("protocol", protocol);
  c.protocol = protocol_from_string(protocol);
  r.get("max_rank", c.max_rank);
  r.finish();
  return c;
}

namespace {

DataConfig data_config_from_json(const json& j, DataConfig c) {
  Reader r(j, "data.");
  r.get("root", c.root);
  r.get("drop_distractors", c.load.drop_distractors);
  if (const json* sj = r.child("synthetic")) {
    Reader s(*sj, r.path("synthetic"));
    auto& sc = c.synth;
    s.get("num_identities", sc.num_identities);
    s.get("test_identities", sc.test_identities);
    s.get("images_per_identity", sc.images_per_identity);
    s.get("queries_per_identity", sc.queries_per_identity);
    s.get("height", sc.height);
    s.get("width", sc.width);
    s.get("cameras", sc.cameras);
    s.get("occlusion_probability", sc.occlusion_probability);
    s.get("gallery_occlusion_probability", sc.gallery_occlusion_probability);
    if (s.has("occluder_kinds")) {
      sc.occluder_kinds.clear();
      for (const auto& k : s.strings("occluder_kinds")) {
        sc.occluder_kinds.push_back(occluder_kind_from_string(k));
      }
    }
    if (s.has("sides")) {
      sc.sides.clear();
      for (const auto& side : s.strings("sides")) sc.sides.push_back(occlusion_side_from_string(side));
    }
    s.get("cover_min", sc.cover_min);
    s.get("cover_max", sc.cover_max);
    s.get("seed", sc.seed);
    s.finish();
  }
  r.finish();
  return c;
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j, ExperimentConfig c) {
  Reader r(j, "");
  if (const json* v = r.child("model")) c.model = model_config_from_json(*v, c.model);
  if (const json* v = r.child("train")) c.train = train_config_from_json(*v, c.train);
  if (const json* v = r.child("retrieval")) c.retrieval = retrieval_config_from_json(*v, c.retrieval);
  if (const json* v = r.child("data")) c.data = data_config_from_json(*v, c.data);
  r.finish();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const ExperimentConfig& base) {
  return experiment_from_json(read_json_file(path), base);
}

void apply_toggle(ExperimentConfig& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("toggle '" + spec + "' is not NAME=on|off");
  const std::string name = spec.substr(0, eq), value = spec.substr(eq + 1);
  bool on;
  if (value == "on") {
    on = true;
  } else if (value == "off") {
    on = false;
  } else {
    throw ConfigError("toggle '" + spec + "': value must be on or off");
  }
  auto& l = cfg.train.losses;
  if (name == "part_id") l.part_id = on;
  else if (name == "part_tp") l.part_tp = on;
  else if (name == "global_id") l.global_id = on;
  else if (name == "sg_id") l.sg_id = on;
  else if (name == "global_tp") l.global_tp = on;
  else if (name == "quality") cfg.model.use_quality = on;
  else if (name == "isa") cfg.model.use_isa = on;
  else throw ConfigError("unknown toggle '" + name + "'");
}

}  // namespace qpm
