import xml.etree.ElementTree as ET

import numpy as np
import pytest

from ibrpen.powerflow import initialize_dynamic_states, solve_powerflow
from ibrpen.simulator import SimulationConfig, run_simulation
from ibrpen.svg import BarStyle, PlotStyle, emit_svg_bars, emit_svg_timeseries, timeseries_axes

NS = {"s": "http://www.w3.org/2000/svg"}


def _points(poly):
    return np.array([[float(c) for c in p.split(",")] for p in poly.get("points").split()])


def test_constant_series_horizontal():
    t = np.linspace(0.0, 20.0, 201)
    style = PlotStyle()
    root = ET.fromstring(emit_svg_timeseries(t, {"bus.7.vm": np.full(t.size, 1.02)}, style))
    (poly,) = root.findall("s:polyline", NS)
    pts = _points(poly)
    assert np.ptp(pts[:, 1]) == 0.0
    ax = timeseries_axes(t, {"x": t}, style)
    assert pts[0, 0] == pytest.approx(ax.left) and pts[-1, 0] == pytest.approx(ax.right)


def test_two_channels_with_legend():
    t = np.arange(10.0)
    svg = emit_svg_timeseries(t, {"bus.1.vm": np.ones(10), "bus.2.vm": np.linspace(0.5, 1, 10)})
    root = ET.fromstring(svg)
    assert [p.get("data-channel") for p in root.findall("s:polyline", NS)] == ["bus.1.vm", "bus.2.vm"]
    assert [e.text for e in root.findall("s:text[@class='legend']", NS)] == ["bus.1.vm", "bus.2.vm"]


def test_reference_lines():
    t = np.arange(10.0)
    style = PlotStyle(refs=((59.6, "59.6 Hz"),))
    root = ET.fromstring(emit_svg_timeseries(t, {"f": np.linspace(59.5, 60, 10)}, style))
    (ref,) = root.findall("s:line[@class='ref']", NS)
    ax = timeseries_axes(t, {"f": np.linspace(59.5, 60, 10)}, style)
    assert float(ref.get("y1")) == pytest.approx(float(ax.py(59.6)), abs=1e-3)


def test_fault_trace_minimum(twoarea, by_id):
    pf = solve_powerflow(twoarea)
    res = run_simulation(twoarea, initialize_dynamic_states(twoarea, pf), by_id["F07-L78a"],
                         SimulationConfig(t_stop=3.0))
    series = {"bus.7.vm": res.vm[:, res.bus_ids.index("7")]}
    style = PlotStyle(refs=((0.7, "70%"), (0.8, "80%")))
    root = ET.fromstring(emit_svg_timeseries(res.time, series, style))
    pts = _points(root.find("s:polyline", NS))
    ax = timeseries_axes(res.time, series, style)
    # svg y grows downward, so the data minimum is the largest pixel y
    assert float(ax.data_y(pts[:, 1].max())) == pytest.approx(series["bus.7.vm"].min(), abs=1e-5)


def test_empty_series_rejected():
    with pytest.raises(ValueError):
        emit_svg_timeseries(np.arange(3.0), {})


def test_bars():
    svg = emit_svg_bars(["F06", "F07"], {"freq": [0, 2], "v_dip70": [1, 0]}, BarStyle(groups=("freq", "v_dip70")))
    root = ET.fromstring(svg)
    rects = root.findall("s:rect[@data-series]", NS)
    assert [r.get("data-series") for r in rects] == ["freq", "v_dip70", "freq", "v_dip70"]
    heights = [float(r.get("height")) for r in rects]
    assert heights[0] == 0.0 and heights[3] == 0.0
    assert heights[2] == pytest.approx(2 * heights[1])
