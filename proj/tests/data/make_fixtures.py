"""Regenerates the tiny encoder/decoder graphs used by the neural backend tests.

Both graphs follow the exported promptable-segmentation signature (same input
and output names and ranks) but are hand-wired from a handful of operators so
that older ONNX importers can run them:

* encoder: 4x4 stride-4 convolution, 1x3x64x64 -> 1x8x16x16
* decoder: three logit maps r_k^2 - |g - p|^2 over a 16x16 low-resolution grid,
  where p is the first prompt point in the 64x64 model frame, with fixed
  scores (0.4, 0.9, 0.7). The remaining inputs are multiplied by zero
  weights so that the importer keeps them as graph inputs.

Run with `python3 make_fixtures.py` (needs numpy and onnx).
"""
import json
import pathlib

import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper

SIDE = 64
CHANNELS = 8
EMB = SIDE // 4
LOW_RES = EMB  # low-res mask side; one cell covers 4x4 model pixels
RADII = (6.0, 12.0, 20.0)
SCORES = (0.4, 0.9, 0.7)


def encoder():
    rng = np.random.default_rng(0)
    w = rng.uniform(-0.1, 0.1, size=(CHANNELS, 3, 4, 4)).astype(np.float32)
    b = np.zeros(CHANNELS, np.float32)
    node = helper.make_node("Conv", ["image", "w", "b"], ["image_embeddings"],
                            kernel_shape=[4, 4], strides=[4, 4])
    graph = helper.make_graph(
        [node], "tiny_encoder",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, [1, 3, SIDE, SIDE])],
        [helper.make_tensor_value_info("image_embeddings", TensorProto.FLOAT,
                                       [1, CHANNELS, EMB, EMB])],
        [numpy_helper.from_array(w, "w"), numpy_helper.from_array(b, "b")])
    return graph


def decoder():
    n = LOW_RES * LOW_RES
    c = (np.arange(LOW_RES, dtype=np.float64) + 0.5) * (SIDE / LOW_RES)
    gx = np.tile(c, LOW_RES)
    gy = np.repeat(c, LOW_RES)
    r2 = np.repeat(np.square(RADII), n)
    # logits = r2 - |g|^2 + 2 g.p - |p|^2, flattened as (1, 3*n)
    bias = (r2 - np.tile(gx * gx + gy * gy, 3)).astype(np.float32)
    lin = np.zeros((4, 3 * n), np.float32)   # rows: p0x, p0y, p1x, p1y; stored transposed
    lin[0] = np.tile(2 * gx, 3)
    lin[1] = np.tile(2 * gy, 3)
    quad = np.zeros((4, 3 * n), np.float32)
    quad[0] = -1.0
    quad[1] = -1.0
    score_w = np.zeros((4, 3), np.float32)
    score_b = np.array(SCORES, np.float32)
    inits = [
        numpy_helper.from_array(bias, "bias"),
        numpy_helper.from_array(np.ascontiguousarray(lin.T), "lin"),
        numpy_helper.from_array(np.ascontiguousarray(quad.T), "quad"),
        numpy_helper.from_array(np.ascontiguousarray(score_w.T), "score_w"),
        numpy_helper.from_array(score_b, "score_b"),
        numpy_helper.from_array(np.array([1, 4], np.int64), "flat_shape"),
        numpy_helper.from_array(np.array([1, 3, LOW_RES, LOW_RES], np.int64), "mask_shape"),
    ]
    nodes = [
        helper.make_node("Reshape", ["point_coords", "flat_shape"], ["p"]),
        helper.make_node("Mul", ["p", "p"], ["pp"]),
        helper.make_node("Gemm", ["p", "lin", "bias"], ["linear"], transB=1),
        helper.make_node("Gemm", ["pp", "quad"], ["square"], transB=1),
        helper.make_node("Add", ["linear", "square"], ["flat_logits"]),
        helper.make_node("Reshape", ["flat_logits", "mask_shape"], ["low_res_masks"]),
        helper.make_node("Gemm", ["p", "score_w", "score_b"], ["score0"], transB=1),
    ]
    # every remaining input feeds the scores through a zero-weight Gemm
    score = "score0"
    for i, (name, size) in enumerate([("image_embeddings", CHANNELS * EMB * EMB),
                                      ("point_labels", 2),
                                      ("mask_input", 16 * EMB * EMB),
                                      ("has_mask_input", 1),
                                      ("orig_im_size", 2)]):
        inits.append(numpy_helper.from_array(np.array([1, size], np.int64), f"shape_{i}"))
        inits.append(numpy_helper.from_array(np.zeros((3, size), np.float32), f"zero_{i}"))
        nodes.append(helper.make_node("Reshape", [name, f"shape_{i}"], [f"flat_{i}"]))
        nodes.append(helper.make_node("Gemm", [f"flat_{i}", f"zero_{i}"], [f"unused_{i}"],
                                      transB=1))
        out = "iou_predictions" if i == 4 else f"score{i + 1}"
        nodes.append(helper.make_node("Add", [score, f"unused_{i}"], [out]))
        score = out
    f = TensorProto.FLOAT
    inputs = [
        helper.make_tensor_value_info("image_embeddings", f, [1, CHANNELS, EMB, EMB]),
        helper.make_tensor_value_info("point_coords", f, [1, 2, 2]),
        helper.make_tensor_value_info("point_labels", f, [1, 2]),
        helper.make_tensor_value_info("mask_input", f, [1, 1, 4 * EMB, 4 * EMB]),
        helper.make_tensor_value_info("has_mask_input", f, [1]),
        helper.make_tensor_value_info("orig_im_size", f, [2]),
    ]
    outputs = [
        helper.make_tensor_value_info("iou_predictions", f, [1, 3]),
        helper.make_tensor_value_info("low_res_masks", f, [1, 3, LOW_RES, LOW_RES]),
    ]
    return helper.make_graph(nodes, "tiny_decoder", inputs, outputs, inits)


def save(graph, path):
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 11)],
                              producer_name="matseg-fixtures")
    model.ir_version = 6
    onnx.checker.check_model(model)
    onnx.save(model, path)


def main():
    out = pathlib.Path(__file__).parent
    save(encoder(), out / "tiny_encoder.onnx")
    save(decoder(), out / "tiny_decoder.onnx")
    meta = {"input_side": SIDE, "embedding": [CHANNELS, EMB, EMB],
            "pixel_mean": [123.675, 116.28, 103.53],
            "pixel_std": [58.395, 57.12, 57.375]}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")


if __name__ == "__main__":
    main()
