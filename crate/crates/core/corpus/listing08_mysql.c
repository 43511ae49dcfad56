// MySQL caching_sha2_password: fast_auth_result.first is true when the
// fast path fails; the attacker needs it false.
static int caching_sha2_password_authenticate(MYSQL_PLUGIN_VIO *vio, MYSQL_SERVER_AUTH_INFO *info) {
    bool first = true;
    first = fast_authenticate(authorization_id, scramble, SCRAMBLE_LENGTH, pkt);
    if (first) {
        if (vio->write_packet(vio, &perform_full_authentication, 1))
            return CR_AUTH_HANDSHAKE;
    } else {
        if (vio->write_packet(vio, &fast_auth_success, 1))
            return CR_AUTH_HANDSHAKE;
        return CR_OK;
    }
    return CR_ERROR;
}
