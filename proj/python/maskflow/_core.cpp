#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>

#include "maskflow/checkpoint.hpp"
#include "maskflow/codec.hpp"
#include "maskflow/config.hpp"
#include "maskflow/data.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/pipeline.hpp"
#include "maskflow/rng.hpp"
#include "maskflow/sampling.hpp"

namespace py = pybind11;
using namespace maskflow;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

config::RunConfig parse_config(const std::string& text) {
    return text.empty() ? config::RunConfig{} : config::RunConfig::parse(text);
}

data::DataConfig data_config(const config::RunConfig& rc) {
    data::DataConfig dc;
    dc.world = rc.world;
    dc.world.sync_defect = rc.data.sync_defect;
    dc.frames = rc.data.frames;
    dc.min_entities = rc.data.min_entities;
    dc.max_entities = rc.data.max_entities;
    dc.audio_tokens = rc.model.audio_tokens;
    return dc;
}

py::dict make_sample(const std::string& cfg, std::uint64_t seed) {
    const config::RunConfig rc = parse_config(cfg);
    const data::Sample s = data::make_sample(seed, data_config(rc));
    py::list masks;
    for (const auto& m : s.masks.masks) masks.append(to_numpy(m));
    py::dict d;
    d["seed"] = s.seed;
    d["n_entities"] = s.scene.n_entities();
    d["frames"] = to_numpy(s.clip.frames);
    d["masks"] = masks;
    d["latent"] = to_numpy(s.latent);
    d["reference"] = to_numpy(s.reference);
    d["audio_tokens"] = to_numpy(s.audio_tokens);
    d["envelope"] = s.audio.envelope_series();
    return d;
}

py::dict train_stage(const std::string& cfg, int stage, const std::optional<std::string>& in_path,
                     const std::string& out_path, std::size_t threads) {
    const config::RunConfig rc = parse_config(cfg);
    std::optional<ckpt::Checkpoint> in;
    if (in_path) in = ckpt::load(*in_path);
    pipeline::TrainOutcome o;
    {
        py::gil_scoped_release release;
        o = pipeline::train_stage(rc, stage, in, threads);
    }
    ckpt::save(out_path, o.checkpoint);
    py::list loss;
    for (const auto& row : o.log) loss.append(row.loss_total);
    py::dict d;
    d["stage"] = stage;
    d["steps"] = o.log.size();
    d["loss_total"] = loss;
    d["skipped_pairs"] = o.skipped_pairs;
    return d;
}

py::array_t<double> sample_video(const std::string& cfg, const std::string& ckpt_path, std::uint64_t seed,
                                 std::size_t frames, std::size_t threads) {
    const config::RunConfig rc = parse_config(cfg);
    const ckpt::Checkpoint ck = ckpt::load(ckpt_path);
    pipeline::check_compatible(ck.params, rc.model);
    if (frames == 0 || frames % codec::kChunk != 0) throw ConfigError("frames must be a positive multiple of 4");
    const std::size_t F = frames / codec::kChunk;
    const world::SceneSpec scene = world::random_scene(substream_seed(seed, "request:scene"), 1, rc.world);
    const world::AudioTrack audio = world::synth_audio(substream_seed(seed, "request:audio", 0), frames,
                                                       world::AudioStyle::speech);
    sample::SamplerConfig sc = rc.sampler;
    sc.seed = seed;
    sc.threads = threads;
    const sample::ModelRef m{&ck.params, &rc.model, {true, true}, nullptr};
    Tensor lat;
    {
        py::gil_scoped_release release;
        lat = sample::sample_clip(m, data::reference_tokens(scene, 4), dit::aggregate_audio(audio, rc.model.audio_tokens),
                                  F, sc);
    }
    return to_numpy(pipeline::decode_tokens(lat, F, rc.model).frames);
}

py::dict sync_eval(const std::string& cfg, const std::string& ckpt_path, std::uint64_t seed_base, std::size_t n_seeds,
                   std::size_t threads) {
    const config::RunConfig rc = parse_config(cfg);
    const ckpt::Checkpoint ck = ckpt::load(ckpt_path);
    pipeline::check_compatible(ck.params, rc.model);
    pipeline::SyncRun r;
    {
        py::gil_scoped_release release;
        r = pipeline::sync_protocol(ck.params, rc, pipeline::seed_list(seed_base, n_seeds), threads);
    }
    py::dict d;
    d["matched"] = r.matched;
    d["control"] = r.control;
    return d;
}

py::dict grad_check(const std::string& cfg, std::uint64_t seed, std::size_t n_coords) {
    const auto r = pipeline::model_grad_check(parse_config(cfg), seed, n_coords);
    py::dict d;
    d["max_rel_error"] = r.max_rel_error;
    d["n_checked"] = r.n_checked;
    d["worst_param"] = r.worst_param;
    return d;
}

py::dict load_checkpoint(const std::string& path) {
    const ckpt::Checkpoint c = ckpt::load(path);
    py::dict params;
    for (const auto& n : c.params.names()) params[py::str(n)] = to_numpy(c.params.get(n));
    py::dict d;
    d["stage"] = c.stage;
    d["config_hash"] = config::hex64(c.config_hash);
    d["params"] = params;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "maskflow core bindings";

    auto base = py::register_exception<Error>(m, "MaskflowError");
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<StageContractError>(m, "StageContractError", base.ptr());
    py::register_exception<NumericalFault>(m, "NumericalFault", base.ptr());

    m.def("config_hash", [](const std::string& cfg) { return parse_config(cfg).hash_hex(); }, py::arg("config") = "",
          "Canonical hash of a JSON configuration (empty string = defaults).");
    m.def("default_config", [] { return config::RunConfig{}.to_json().dump(2); });
    m.def("make_sample", &make_sample, py::arg("config"), py::arg("seed"));
    m.def("encode", [](py::array_t<double> frames, std::size_t spatial) {
        return to_numpy(codec::encode(world::VideoClip{from_numpy(frames)}, spatial).data);
    }, py::arg("frames"), py::arg("spatial") = 4);
    m.def("decode", [](py::array_t<double> latent) {
        Tensor t = from_numpy(latent);
        if (t.shape().size() != 4) throw DimensionError("latent must be F x h x w x C");
        return to_numpy(codec::decode(codec::LatentSeq{t, codec::Layout::chunked_uniform, 4}).frames);
    }, py::arg("latent"));
    m.def("train_stage", &train_stage, py::arg("config"), py::arg("stage"), py::arg("in_path") = std::nullopt,
          py::arg("out_path"), py::arg("threads") = 1);
    m.def("sample", &sample_video, py::arg("config"), py::arg("ckpt"), py::arg("seed"), py::arg("frames") = 16,
          py::arg("threads") = 1);
    m.def("sync_eval", &sync_eval, py::arg("config"), py::arg("ckpt"), py::arg("seed_base") = 1000,
          py::arg("n_seeds") = 4, py::arg("threads") = 1);
    m.def("grad_check", &grad_check, py::arg("config") = "", py::arg("seed") = 0, py::arg("n_coords") = 100);
    m.def("verify_mask_factorization", &sample::verify_mask_factorization, py::arg("n_regions") = 3,
          py::arg("n_states") = 4, py::arg("n_audios") = 3, py::arg("seed") = 0, py::arg("coupled") = false);
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
}
