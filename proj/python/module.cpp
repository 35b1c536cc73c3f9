#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "phar/btmodel.hpp"
#include "phar/data.hpp"
#include "phar/evalsuite.hpp"
#include "phar/training.hpp"

namespace py = pybind11;
using namespace phar;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const FloatArray& a) {
    const auto info = a.request();
    Shape s;
    if (info.ndim == 4)
        s = Shape(static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]),
                  static_cast<int>(info.shape[2]), static_cast<int>(info.shape[3]));
    else if (info.ndim == 3)
        s = Shape(1, static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]),
                  static_cast<int>(info.shape[2]));
    else if (info.ndim == 2)
        s = Shape(1, 1, static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]));
    else if (info.ndim == 1)
        s = Shape(1, static_cast<int>(info.shape[0]), 1, 1);  // channel vector
    else
        throw_value("expected a 1D..4D array");
    Tensor t(s);
    std::copy(static_cast<const float*>(info.ptr),
              static_cast<const float*>(info.ptr) + s.numel(), t.data());
    return t;
}

py::array_t<float> tensor_to_array(const Tensor& t) {
    const Shape& s = t.shape();
    py::array_t<float> out({s.n, s.c, s.h, s.w});
    std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
    return out;
}

// Owns the model stack behind the python-facing harmonization API.
class Harmonizer {
public:
    Harmonizer(int scale, uint64_t seed) {
        TrainConfig cfg;
        cfg.scale = scale;
        cfg.seed = seed;
        models_ = std::make_unique<Models>(cfg);
    }

    explicit Harmonizer(const std::string& checkpoint_path) {
        TrainConfig cfg = peek_checkpoint_config(checkpoint_path);
        models_ = std::make_unique<Models>(cfg);
        Rng rng(0);
        int64_t step = 0;
        load_checkpoint(checkpoint_path, models_->store_refs(), rng, step);
    }

    py::tuple harmonize(const FloatArray& composite, const FloatArray& background,
                        const FloatArray& mask) {
        NoGradScope no_grad;
        HarmonizeResult r =
            models_->gen.harmonize(tensor_from_array(composite), tensor_from_array(background),
                                   tensor_from_array(mask), false);
        return py::make_tuple(tensor_to_array(r.output), tensor_to_array(r.soft_mask));
    }

private:
    std::unique_ptr<Models> models_;
};

}  // namespace

PYBIND11_MODULE(_pharnet, m) {
    m.doc() = "painterly image harmonization via adversarial residual learning";

    m.def(
        "conv2d",
        [](const FloatArray& x, const FloatArray& w, const FloatArray& b, int stride, int pad,
           const std::string& mode) {
            Tensor bias = tensor_from_array(b);
            Tensor bt(Shape(1, static_cast<int>(bias.numel()), 1, 1));
            std::copy(bias.data(), bias.data() + bias.numel(), bt.data());
            return tensor_to_array(conv2d(tensor_from_array(x), tensor_from_array(w), bt,
                                          stride, pad,
                                          mode == "reflect" ? PadMode::reflect : PadMode::zero));
        },
        py::arg("input"), py::arg("weight"), py::arg("bias"), py::arg("stride") = 1,
        py::arg("padding") = 0, py::arg("pad_mode") = "zero");

    m.def("relu",
          [](const FloatArray& x) { return tensor_to_array(relu(tensor_from_array(x))); });
    m.def("sigmoid",
          [](const FloatArray& x) { return tensor_to_array(sigmoid(tensor_from_array(x))); });
    m.def(
        "upsample_nearest",
        [](const FloatArray& x, int s) {
            return tensor_to_array(upsample_nearest(tensor_from_array(x), s));
        },
        py::arg("input"), py::arg("scale") = 2);

    m.def(
        "masked_moments",
        [](const FloatArray& f, const FloatArray& mask) {
            auto [mu, sd] = masked_moments(tensor_from_array(f), tensor_from_array(mask));
            return py::make_tuple(tensor_to_array(mu), tensor_to_array(sd));
        },
        py::arg("feature"), py::arg("mask"));

    m.def("mse", [](const FloatArray& a, const FloatArray& b) {
        return mse(tensor_from_array(a), tensor_from_array(b)).item();
    });

    m.def(
        "adain_stylize",
        [](const FloatArray& comp, const FloatArray& bg, const FloatArray& mask) {
            return tensor_to_array(Generator::adain_stylize(
                tensor_from_array(comp), tensor_from_array(bg), tensor_from_array(mask)));
        },
        py::arg("comp_features"), py::arg("bg_features"), py::arg("mask"));

    m.def(
        "resize_mask_pyramid",
        [](const FloatArray& mask) {
            MaskPyramid p = Generator::resize_mask_pyramid(tensor_from_array(mask));
            py::list out;
            for (const Tensor& t : p.layers) out.append(tensor_to_array(t));
            return out;
        },
        py::arg("mask"));

    py::class_<Harmonizer>(m, "Harmonizer")
        .def(py::init<int, uint64_t>(), py::arg("scale") = 8, py::arg("seed") = 0)
        .def(py::init<const std::string&>(), py::arg("checkpoint"))
        .def("harmonize", &Harmonizer::harmonize, py::arg("composite"), py::arg("background"),
             py::arg("mask"), "returns (harmonized image, soft mask)");

    m.def(
        "bt_fit",
        [](const std::vector<std::string>& methods,
           const std::vector<std::vector<double>>& wins) {
            BtResult r = bt_fit(methods, wins);
            py::dict out;
            for (size_t i = 0; i < r.methods.size(); ++i)
                out[py::str(r.methods[i])] = r.scores[i];
            return out;
        },
        py::arg("methods"), py::arg("wins"),
        "maximum-likelihood Bradley-Terry log-strengths, zero-mean");

    m.def(
        "synth_corpus",
        [](const std::string& dir, int n_fg, int n_bg, int size, uint64_t seed) {
            synth_corpus(dir, n_fg, n_bg, size, seed);
        },
        py::arg("dir"), py::arg("n_fg") = 16, py::arg("n_bg") = 16, py::arg("size") = 64,
        py::arg("seed") = 0);

    m.def("load_image",
          [](const std::string& path) { return tensor_to_array(load_image(path)); });
    m.def("load_mask",
          [](const std::string& path) { return tensor_to_array(load_mask(path)); });
    m.def("save_image", [](const FloatArray& img, const std::string& path) {
        save_image(tensor_from_array(img), path);
    });
}
