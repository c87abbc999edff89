#pragma once

// Generated by gen_oracles.py (mpmath, 50 digits).

namespace oracle {

struct SpecialRow {
  double x, lgamma, digamma, trigamma;
};

inline constexpr SpecialRow kSpecial[] = {
    {1e-3, 6.9071788853838536825, -1000.5755719318103005, 1000001.642533195869},
    {0.1, 2.2527126517342059599, -10.423754940411076795, 101.43329915079275882},
    {0.5, 0.57236494292470008707, -1.9635100260214234794, 4.9348022005446793094},
    {1, 0.0, -0.57721566490153286061, 1.6449340668482264365},
    {1.5, -0.12078223763524522235, 0.036489973978576520559, 0.93480220054467930942},
    {2, 0.0, 0.42278433509846713939, 0.64493406684822643647},
    {3.7, 1.4280723266653879219, 1.1671535393615113859, 0.3100378576700383191},
    {6, 4.7874917427820459942, 1.7061176684318004727, 0.18132295573711532536},
    {10, 12.801827480081469611, 2.2517525890667211076, 0.10516633568168574612},
    {25.5, 56.389167643719946744, 3.2189424728839197665, 0.039994669649562924037},
    {100, 359.13420536957539878, 4.6001618527380874002, 0.010050166663333571395},
    {1234.5, 7550.5509010778948957, 7.1180162318279978433, 0.0008103727271269666527},
};

inline constexpr double kSoftplusMinus50 = 1.928749847963917783e-22;
inline constexpr double kSoftplusZero = 0.69314718055994530942;
inline constexpr double kKlDir2345 = 1.1294396857552039507;
inline constexpr double kKlDirSoftplusZero4 = 0.1634421649422993035;

}  // namespace oracle
