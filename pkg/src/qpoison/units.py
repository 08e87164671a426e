"""Physical constants in the internal unit system (um, ns, meV)."""

HBAR_MEV_NS = 6.582119569e-4        # meV ns
H_MEV_NS = 4.135667696e-3           # meV ns
H_MEV_S = 4.135667696e-12           # meV s
HBAR_EV_S = 6.582119569e-16
KB_MEV_K = 8.617333262e-2           # meV / K
KB_J_K = 1.380649e-23
E_CHARGE = 1.602176634e-19          # C
J_PER_EV = 1.602176634e-19
AVOGADRO = 6.02214076e23


def frequency_to_energy_meV(nu_thz):
    return nu_thz * 1e12 * H_MEV_S


def energy_to_frequency_hz(energy_meV):
    return energy_meV / H_MEV_S
