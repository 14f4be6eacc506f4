"""Layout of the 42-entry system state and the 9-entry pump health state."""
import numpy as np

STATE_IDS = (
    "t",
    "N_I", "N_Xe",
    "T_c_in", "T_c_out", "P_c_in", "P_c_out",
    "T_ihx_p_in", "T_ihx_p_out", "P_ihx_p_in", "P_ihx_p_out",
    "T_ihx_s_in", "T_ihx_s_out", "P_ihx_s_in", "P_ihx_s_out",
    "T_sg_in", "T_sg_out", "P_sg_in", "P_sg_out",
    "m_c", "m_s", "m_sg",
    "Q_RX", "Q_HX", "Q_SG",
    "C_1", "C_2", "C_3", "C_4", "C_5", "C_6",
    "rho_m", "rho_c", "rho_f", "rho_cr",
    "z_cr",
    "m_P_p", "m_P_s",
    "n_p", "n_s",
    "dP_p", "dP_s",
)
N_STATE = len(STATE_IDS)
IDX = {name: i for i, name in enumerate(STATE_IDS)}

UNITS = {
    "t": "s", "N_I": "dk/k", "N_Xe": "dk/k",
    "z_cr": "m", "n_p": "RPM", "n_s": "RPM",
}
for _name in STATE_IDS:
    if _name.startswith("T_"):
        UNITS[_name] = "K"
    elif _name.startswith("P_") or _name.startswith("dP_"):
        UNITS[_name] = "Pa"
    elif _name.startswith("m_"):
        UNITS[_name] = "kg/s"
    elif _name.startswith("Q_"):
        UNITS[_name] = "W"
    elif _name.startswith("rho_"):
        UNITS[_name] = "dk/k"
    elif _name.startswith("C_"):
        UNITS[_name] = "-"

INPUT_IDS = ("t", "Q_RX_T")

PUMP_IDS = ("t", "Q_PD_p", "Q_P_p", "K_p", "eta_p", "Q_PD_s", "Q_P_s", "K_s", "eta_s")
N_PUMP = len(PUMP_IDS)
PUMP_IDX = {name: i for i, name in enumerate(PUMP_IDS)}

# Scalar indices used inside numba kernels.
I_T = IDX["t"]
I_NI = IDX["N_I"]
I_NXE = IDX["N_Xe"]
I_TCIN = IDX["T_c_in"]
I_TCOUT = IDX["T_c_out"]
I_PCIN = IDX["P_c_in"]
I_PCOUT = IDX["P_c_out"]
I_TIPIN = IDX["T_ihx_p_in"]
I_TIPOUT = IDX["T_ihx_p_out"]
I_PIPIN = IDX["P_ihx_p_in"]
I_PIPOUT = IDX["P_ihx_p_out"]
I_TISIN = IDX["T_ihx_s_in"]
I_TISOUT = IDX["T_ihx_s_out"]
I_PISIN = IDX["P_ihx_s_in"]
I_PISOUT = IDX["P_ihx_s_out"]
I_TSGIN = IDX["T_sg_in"]
I_TSGOUT = IDX["T_sg_out"]
I_PSGIN = IDX["P_sg_in"]
I_PSGOUT = IDX["P_sg_out"]
I_MC = IDX["m_c"]
I_MS = IDX["m_s"]
I_MSG = IDX["m_sg"]
I_QRX = IDX["Q_RX"]
I_QHX = IDX["Q_HX"]
I_QSG = IDX["Q_SG"]
I_C1 = IDX["C_1"]
I_RHOM = IDX["rho_m"]
I_RHOC = IDX["rho_c"]
I_RHOF = IDX["rho_f"]
I_RHOCR = IDX["rho_cr"]
I_ZCR = IDX["z_cr"]
I_MPP = IDX["m_P_p"]
I_MPS = IDX["m_P_s"]
I_NP = IDX["n_p"]
I_NS = IDX["n_s"]
I_DPP = IDX["dP_p"]
I_DPS = IDX["dP_s"]


def indices(ids):
    """Map variable ids to state indices, raising KeyError on unknown ids."""
    out = []
    for name in ids:
        if name not in IDX:
            raise KeyError(f"unknown state variable id {name!r}")
        out.append(IDX[name])
    return np.asarray(out, dtype=np.int64)
