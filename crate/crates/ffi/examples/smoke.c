#include <stdio.h>
#include "homog.h"

int main(void) {
    HomogMap *map = NULL;
    HomogObservable *obs = NULL;
    double sigma[1], e[1];
    char msg[256];

    if (homog_map_new("doubling", 0.0, 0.0, &map) != HOMOG_STATUS_OK) {
        homog_last_error(msg, sizeof msg);
        fprintf(stderr, "%s\n", msg);
        return 1;
    }
    homog_observable_new("cos", map, &obs);
    if (homog_tower_coefficients(map, obs, 512, sigma, e, NULL, NULL, 1) != HOMOG_STATUS_OK) {
        homog_last_error(msg, sizeof msg);
        fprintf(stderr, "%s\n", msg);
        return 1;
    }
    printf("homog %s: Sigma = %.6f, E = %.6f\n", homog_version(), sigma[0], e[0]);
    homog_observable_free(obs);
    homog_map_free(map);
    return 0;
}
